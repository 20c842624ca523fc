// Browser console wiring: canvas, keyboard capture (ctrl+tab forwarded to
// the window manager, alt+tab as the fallback), panels, panic button.

import { isFocusCycle, mapKey } from "./keymap.js";
import { ProtocolClient, webSocketTransport } from "./protocol.js";
import { ConsoleSession } from "./session.js";

const $ = (id: string) => document.getElementById(id)!;

let session: ConsoleSession | null = null;
let retryTimer: ReturnType<typeof setTimeout> | null = null;

function setBanner(connected: boolean, detail: string): void {
    const banner = $("banner");
    banner.textContent = connected ? `connected ${detail}` : `disconnected ${detail}`;
    banner.className = connected ? "banner ok" : "banner bad";
}

async function connect(): Promise<void> {
    const url = ($("endpoint") as HTMLInputElement).value;
    try {
        const transport = await webSocketTransport(url);
        const client = new ProtocolClient(transport);
        const canvas = $("screen") as HTMLCanvasElement;
        const ctx2d = canvas.getContext("2d")!;
        session = new ConsoleSession(client, {
            frame: (frame) => {
                canvas.width = frame.width;
                canvas.height = frame.height;
                const pixels = new Uint8ClampedArray(frame.rgba);
                ctx2d.putImageData(
                    new ImageData(pixels, frame.width, frame.height), 0, 0);
            },
            status: setBanner,
            ps: (lines) => { $("ps").textContent = lines.join("\n"); },
            trace: (lines) => { $("trace").textContent = lines.join("\n"); },
            panic: (text) => { $("panic-panel").textContent = text; },
        });
        transport.onClose(() => {
            setBanner(false, "(retrying)");
            session = null;
            scheduleRetry();
        });
        await session.connect();
        session.startPolling(parseInt(($("poll") as HTMLInputElement).value, 10));
        if (($("realtime") as HTMLInputElement).checked) {
            session.startRealtime(100);
        }
        setInterval(() => session?.refreshPanels().catch(() => undefined), 1000);
    } catch (err) {
        setBanner(false, String(err));
        scheduleRetry();
    }
}

function scheduleRetry(): void {
    if (retryTimer !== null) {
        return;
    }
    retryTimer = setTimeout(() => {
        retryTimer = null;
        void connect();
    }, 2000);
}

function handleKey(ev: KeyboardEvent, action: "press" | "release"): void {
    if (!session || (ev.target as HTMLElement).tagName === "INPUT") {
        return;
    }
    const stroke = mapKey(ev);
    if (!stroke) {
        return;
    }
    if (isFocusCycle(ev)) {
        // keep the combo away from the browser; alt+tab is remapped to the
        // window manager's ctrl+tab
        ev.preventDefault();
        stroke.mods = ["ctrl"];
    }
    ev.preventDefault();
    void session.sendKey(stroke, action);
}

window.addEventListener("DOMContentLoaded", () => {
    $("connect").addEventListener("click", () => void connect());
    $("panic-btn").addEventListener("click", () => void session?.panic());
    $("step-btn").addEventListener("click", () =>
        void session?.step(100_000).then(() => session?.pollFrame()));
    $("realtime").addEventListener("change", (ev) => {
        if (!session) return;
        if ((ev.target as HTMLInputElement).checked) {
            session.startRealtime(100);
        } else {
            session.stopRealtime();
        }
    });
    window.addEventListener("keydown", (ev) => handleKey(ev, "press"), true);
    window.addEventListener("keyup", (ev) => handleKey(ev, "release"), true);
    void connect();
});
