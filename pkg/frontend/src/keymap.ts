// Keyboard-first annotation: one hand on the numpad, one on the digits.
//
// Space        toggle presence
// Numpad 1-9   location cell, laid out like the tile (7 = top-left)
// Digits 1-4   quantity bin (2 = "1 to 5")
// Enter        submit the current draft

import type { LocationCell, QuantityBin } from "./types.js";

export type KeyAction =
  | { kind: "toggle-presence" }
  | { kind: "set-location"; cell: LocationCell }
  | { kind: "set-quantity"; bin: QuantityBin }
  | { kind: "submit" };

const NUMPAD_LOCATIONS: Record<string, LocationCell> = {
  Numpad7: "top-left",
  Numpad8: "top",
  Numpad9: "top-right",
  Numpad4: "left",
  Numpad5: "center",
  Numpad6: "right",
  Numpad1: "bottom-left",
  Numpad2: "bottom",
  Numpad3: "bottom-right",
};

const DIGIT_QUANTITIES: Record<string, QuantityBin> = {
  Digit1: "0 to 1",
  Digit2: "1 to 5",
  Digit3: "5 to 10",
  Digit4: "10 to inf",
};

/** Map a KeyboardEvent.code to a session action, or null if unbound. */
export function actionForKey(code: string): KeyAction | null {
  if (code === "Space") return { kind: "toggle-presence" };
  if (code === "Enter" || code === "NumpadEnter") return { kind: "submit" };
  const cell = NUMPAD_LOCATIONS[code];
  if (cell) return { kind: "set-location", cell };
  const bin = DIGIT_QUANTITIES[code];
  if (bin) return { kind: "set-quantity", bin };
  return null;
}
