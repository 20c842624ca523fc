// Browser KeyboardEvent.code -> simulator scancodes (HID-style usage ids),
// mirroring the keymap the kernel's line discipline cooks.

const CODES: Record<string, number> = {
    Enter: 40, Escape: 41, Backspace: 42, Tab: 43, Space: 44,
    Minus: 45, Equal: 46, BracketLeft: 47, BracketRight: 48, Backslash: 49,
    Semicolon: 51, Quote: 52, Backquote: 53, Comma: 54, Period: 55,
    Slash: 56,
    ArrowRight: 79, ArrowLeft: 80, ArrowDown: 81, ArrowUp: 82,
};

for (let i = 0; i < 26; i++) {
    CODES["Key" + String.fromCharCode(65 + i)] = 4 + i;
}
for (let d = 1; d <= 9; d++) {
    CODES["Digit" + d] = 30 + d - 1;
}
CODES["Digit0"] = 39;

export interface KeyStroke {
    scancode: number;
    mods: string[];
}

/** Map a browser key event; returns null for keys the simulator ignores. */
export function mapKey(ev: { code: string; ctrlKey: boolean; shiftKey: boolean;
                             altKey: boolean }): KeyStroke | null {
    const scancode = CODES[ev.code];
    if (scancode === undefined) {
        return null;
    }
    const mods: string[] = [];
    if (ev.ctrlKey) mods.push("ctrl");
    if (ev.shiftKey) mods.push("shift");
    if (ev.altKey) mods.push("alt");
    return { scancode, mods };
}

/** The WM focus-cycle combo; alt+tab doubles as the fallback for browsers
 *  that reserve ctrl+tab for their own tab switching. */
export function isFocusCycle(ev: { code: string; ctrlKey: boolean;
                                   altKey: boolean }): boolean {
    return ev.code === "Tab" && (ev.ctrlKey || ev.altKey);
}

export function keyCommand(stroke: KeyStroke, action: "press" | "release"): string {
    const mods = stroke.mods.length ? stroke.mods.join(",") : "-";
    return `key ${stroke.scancode} ${action} ${mods}`;
}
