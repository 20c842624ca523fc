// The ctl line protocol over a message transport (WebSocket in the
// browser). One command in flight at a time; each command gets exactly
// one reply message ("ok ...", "err ...", or "ok <n>" plus n lines).

export interface Transport {
    send(line: string): void;
    onMessage(handler: (text: string) => void): void;
    onClose(handler: () => void): void;
    close(): void;
}

export interface LogEntry {
    command: string;
    reply: string;
}

interface Pending {
    command: string;
    resolve: (reply: string) => void;
    reject: (err: Error) => void;
}

export class ProtocolClient {
    private queue: Pending[] = [];
    private inFlight: Pending | null = null;
    readonly log: LogEntry[] = [];
    closed = false;

    constructor(private transport: Transport) {
        transport.onMessage((text) => this.handleReply(text));
        transport.onClose(() => {
            this.closed = true;
            const err = new Error("connection closed");
            if (this.inFlight) {
                this.inFlight.reject(err);
                this.inFlight = null;
            }
            for (const p of this.queue.splice(0)) {
                p.reject(err);
            }
        });
    }

    send(command: string): Promise<string> {
        return new Promise((resolve, reject) => {
            if (this.closed) {
                reject(new Error("connection closed"));
                return;
            }
            this.queue.push({ command, resolve, reject });
            this.pump();
        });
    }

    /** Like send(), but strips the "ok " prefix and raises on "err". */
    async request(command: string): Promise<string> {
        const reply = await this.send(command);
        if (reply.startsWith("err")) {
            throw new Error(reply);
        }
        return reply.startsWith("ok") ? reply.slice(2).trimStart() : reply;
    }

    /** A counted-block reply ("ok <n>\n<lines>") as its payload lines. */
    async requestBlock(command: string): Promise<string[]> {
        const reply = await this.send(command);
        if (reply.startsWith("err")) {
            throw new Error(reply);
        }
        const lines = reply.split("\n");
        const head = lines[0].split(" ");
        const count = parseInt(head[1] ?? "0", 10);
        return lines.slice(1, 1 + count);
    }

    private pump(): void {
        if (this.inFlight || this.queue.length === 0) {
            return;
        }
        this.inFlight = this.queue.shift()!;
        this.transport.send(this.inFlight.command);
    }

    private handleReply(text: string): void {
        const pending = this.inFlight;
        this.inFlight = null;
        if (pending) {
            this.log.push({ command: pending.command, reply: text });
            pending.resolve(text);
        }
        this.pump();
    }
}

export function webSocketTransport(url: string): Promise<Transport> {
    return new Promise((resolve, reject) => {
        const ws = new WebSocket(url);
        let messageHandler: (text: string) => void = () => undefined;
        let closeHandler: () => void = () => undefined;
        ws.onopen = () => resolve({
            send: (line) => ws.send(line),
            onMessage: (h) => { messageHandler = h; },
            onClose: (h) => { closeHandler = h; },
            close: () => ws.close(),
        });
        ws.onerror = () => reject(new Error("websocket connect failed"));
        ws.onmessage = (ev) => messageHandler(String(ev.data));
        ws.onclose = () => closeHandler();
    });
}
