// Session state: geometry, the frame poll loop, realtime stepping, and
// the trace/ps/panic panels. Every action is exactly one documented
// protocol command; the client log doubles as a replayable recording.

import { decodeBase64, decodePPM, Frame } from "./ppm.js";
import { keyCommand, KeyStroke } from "./keymap.js";
import { ProtocolClient } from "./protocol.js";

export interface SessionEvents {
    frame?: (frame: Frame) => void;
    status?: (connected: boolean, detail: string) => void;
    ps?: (lines: string[]) => void;
    trace?: (lines: string[]) => void;
    panic?: (text: string) => void;
}

export class ConsoleSession {
    width = 0;
    height = 0;
    private frameTimer: ReturnType<typeof setInterval> | null = null;
    private stepTimer: ReturnType<typeof setInterval> | null = null;

    constructor(private client: ProtocolClient,
                private events: SessionEvents = {}) {}

    async connect(): Promise<void> {
        const geo = await this.client.request("geometry");
        const fields = new Map(
            geo.split(" ").map((kv) => kv.split("=") as [string, string]));
        this.width = parseInt(fields.get("w") ?? "0", 10);
        this.height = parseInt(fields.get("h") ?? "0", 10);
        this.events.status?.(true, `${this.width}x${this.height}`);
        await this.refreshPanels();
        await this.pollFrame();
    }

    async pollFrame(): Promise<Frame> {
        const b64 = await this.client.request("frame");
        const frame = decodePPM(decodeBase64(b64));
        this.events.frame?.(frame);
        return frame;
    }

    startPolling(intervalMs: number): void {
        this.stopPolling();
        this.frameTimer = setInterval(() => {
            this.pollFrame().catch(() => this.stopPolling());
        }, intervalMs);
    }

    stopPolling(): void {
        if (this.frameTimer !== null) {
            clearInterval(this.frameTimer);
            this.frameTimer = null;
        }
    }

    /** Realtime mode: the console issues step commands on a host timer. */
    startRealtime(intervalMs: number, ratio = 1.0): void {
        this.stopRealtime();
        const ticks = Math.round(intervalMs * 1000 * ratio);
        this.stepTimer = setInterval(() => {
            this.client.request(`step ${ticks}`).catch(() => this.stopRealtime());
        }, intervalMs);
    }

    stopRealtime(): void {
        if (this.stepTimer !== null) {
            clearInterval(this.stepTimer);
            this.stepTimer = null;
        }
    }

    async step(ticks: number): Promise<void> {
        await this.client.request(`step ${ticks}`);
    }

    async sendKey(stroke: KeyStroke, action: "press" | "release"): Promise<void> {
        await this.client.request(keyCommand(stroke, action));
    }

    async refreshPanels(): Promise<void> {
        const ps = await this.client.requestBlock("ps");
        this.events.ps?.(ps);
        const trace = await this.client.requestBlock("tracedump 32");
        this.events.trace?.(trace);
    }

    async panic(): Promise<string> {
        const lines = await this.client.requestBlock("panic");
        const text = lines.join("\n");
        this.events.panic?.(text);
        return text;
    }

    commandLog(): string[] {
        return this.client.log.map((e) => e.command);
    }
}
