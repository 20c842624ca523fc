import { describe, expect, it } from "vitest";

import { ProtocolClient, Transport } from "../src/protocol.js";
import { ConsoleSession } from "../src/session.js";

/** Scripted endpoint: replies per command, like the simulator would. */
class FakeEndpoint implements Transport {
    received: string[] = [];
    private handler: (text: string) => void = () => undefined;
    private closeHandler: () => void = () => undefined;

    constructor(private replies: (cmd: string) => string) {}

    send(line: string): void {
        this.received.push(line);
        queueMicrotask(() => this.handler(this.replies(line)));
    }

    onMessage(h: (text: string) => void): void { this.handler = h; }
    onClose(h: () => void): void { this.closeHandler = h; }
    close(): void { this.closeHandler(); }
}

const tinyPPM = Buffer.concat([
    Buffer.from("P6\n2 2\n255\n"),
    Buffer.from([10, 0, 0, 0, 20, 0, 0, 0, 30, 40, 40, 40]),
]).toString("base64");

function simReplies(cmd: string): string {
    if (cmd === "geometry") return "ok w=2 h=2 stride=8 format=rgba8888";
    if (cmd === "frame") return "ok " + tinyPPM;
    if (cmd === "ps") return "ok 2\n1 RUNNING 0 wm\n2 BLOCKED 1 shell";
    if (cmd.startsWith("tracedump")) return "ok 1\n10 0 IRQ 0 1";
    if (cmd === "panic") return "ok 2\nPANIC handled by core 0 at tick 5 (FIQ)\ncore 0: idle irq_depth=0";
    if (cmd.startsWith("step")) return "ok now=123";
    if (cmd.startsWith("key")) return "ok";
    return "err BadCommand test";
}

describe("ProtocolClient", () => {
    it("resolves one reply per command, in order", async () => {
        const ep = new FakeEndpoint(simReplies);
        const client = new ProtocolClient(ep);
        const [a, b] = await Promise.all([
            client.send("step 10"),
            client.send("ps"),
        ]);
        expect(a).toBe("ok now=123");
        expect(b.startsWith("ok 2")).toBe(true);
        expect(ep.received).toEqual(["step 10", "ps"]);
    });

    it("raises on err replies via request()", async () => {
        const client = new ProtocolClient(new FakeEndpoint(simReplies));
        await expect(client.request("nonsense")).rejects.toThrow(/BadCommand/);
    });

    it("splits counted blocks", async () => {
        const client = new ProtocolClient(new FakeEndpoint(simReplies));
        const lines = await client.requestBlock("ps");
        expect(lines).toEqual(["1 RUNNING 0 wm", "2 BLOCKED 1 shell"]);
    });

    it("rejects everything pending when the connection closes", async () => {
        const ep = new FakeEndpoint(() => { throw new Error("never"); });
        const client = new ProtocolClient({
            send: () => undefined,
            onMessage: ep.onMessage.bind(ep),
            onClose: (h) => { setTimeout(h, 0); },
            close: () => undefined,
        });
        await expect(client.send("step 1")).rejects.toThrow(/closed/);
    });
});

describe("ConsoleSession", () => {
    it("connects, decodes frames, and fills panels", async () => {
        const ep = new FakeEndpoint(simReplies);
        const client = new ProtocolClient(ep);
        const got: Record<string, unknown> = {};
        const session = new ConsoleSession(client, {
            frame: (f) => { got.frame = f; },
            ps: (l) => { got.ps = l; },
            trace: (l) => { got.trace = l; },
            panic: (t) => { got.panic = t; },
        });
        await session.connect();
        expect(session.width).toBe(2);
        const frame = got.frame as { width: number; rgba: Uint8ClampedArray };
        expect(frame.width).toBe(2);
        expect(frame.rgba[0]).toBe(10);
        expect(got.ps).toEqual(["1 RUNNING 0 wm", "2 BLOCKED 1 shell"]);

        const text = await session.panic();
        expect(text).toContain("PANIC handled by core 0");
        expect(got.panic).toBe(text);
    });

    it("emits only documented protocol verbs (protocol purity)", async () => {
        const ep = new FakeEndpoint(simReplies);
        const client = new ProtocolClient(ep);
        const session = new ConsoleSession(client, {});
        await session.connect();
        await session.sendKey({ scancode: 43, mods: ["ctrl"] }, "press");
        await session.step(1000);
        await session.panic();
        const documented = /^(boot|step|key|text|screenshot|frame|geometry|tracedump|ps|panic|spawn|shutdown)( |$)/;
        for (const cmd of session.commandLog()) {
            expect(cmd).toMatch(documented);
        }
        expect(session.commandLog()).toContain("key 43 press ctrl");
    });
});
