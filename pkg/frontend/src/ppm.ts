// Binary PPM (P6) decoding for framebuffer polls.

export interface Frame {
    width: number;
    height: number;
    rgba: Uint8ClampedArray;
}

export function decodeBase64(b64: string): Uint8Array {
    if (typeof atob === "function") {
        const bin = atob(b64);
        const out = new Uint8Array(bin.length);
        for (let i = 0; i < bin.length; i++) {
            out[i] = bin.charCodeAt(i);
        }
        return out;
    }
    // node (tests, replay tooling)
    return new Uint8Array(Buffer.from(b64, "base64"));
}

export function decodePPM(data: Uint8Array): Frame {
    // header: "P6\n<width> <height>\n<maxval>\n"
    let pos = 0;
    const token = (): string => {
        while (pos < data.length && isSpace(data[pos])) pos++;
        const start = pos;
        while (pos < data.length && !isSpace(data[pos])) pos++;
        return String.fromCharCode(...data.subarray(start, pos));
    };
    if (token() !== "P6") {
        throw new Error("not a P6 PPM");
    }
    const width = parseInt(token(), 10);
    const height = parseInt(token(), 10);
    const maxval = parseInt(token(), 10);
    if (!(width > 0 && height > 0) || maxval !== 255) {
        throw new Error(`bad PPM geometry ${width}x${height}/${maxval}`);
    }
    pos++; // single whitespace after maxval
    const need = width * height * 3;
    if (data.length - pos < need) {
        throw new Error(`short PPM payload: ${data.length - pos} < ${need}`);
    }
    const rgba = new Uint8ClampedArray(width * height * 4);
    for (let i = 0, j = pos; i < width * height; i++, j += 3) {
        rgba[i * 4] = data[j];
        rgba[i * 4 + 1] = data[j + 1];
        rgba[i * 4 + 2] = data[j + 2];
        rgba[i * 4 + 3] = 255;
    }
    return { width, height, rgba };
}

function isSpace(c: number): boolean {
    return c === 0x20 || c === 0x0a || c === 0x0d || c === 0x09;
}
