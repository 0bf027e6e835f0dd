import { describe, expect, it } from "vitest";

import { actionForKey } from "../src/keymap.js";
import type { KeyAction } from "../src/keymap.js";
import {
  AnnotationSession,
  emptyDraft,
  submitCurrent,
} from "../src/session.js";
import type { LabelPoster } from "../src/session.js";
import type {
  LabelDraft,
  LocationCell,
  PostResult,
  QuantityBin,
  TileEntry,
} from "../src/types.js";
import { LOCATION_GRID, QUANTITY_CHOICES } from "../src/types.js";

function entry(tileId: string, labeled = false): TileEntry {
  return {
    tile_id: tileId,
    region: "demo",
    row: 0,
    col: 0,
    label: labeled
      ? { present: false, location: "NA", quantity: "NA", annotator_id: "x" }
      : null,
  };
}

function freshSession(n = 4): AnnotationSession {
  const tiles = Array.from({ length: n }, (_, i) => entry(`t${i}`));
  return new AnnotationSession(tiles, "demo");
}

class RecordingPoster implements LabelPoster {
  calls: Array<{ tileId: string; draft: LabelDraft }> = [];
  result: PostResult = {
    ok: true,
    label: {
      tile_id: "t0",
      present: false,
      location: "NA",
      quantity: "NA",
      annotator_id: "anonymous",
    },
  };

  postLabel(tileId: string, draft: LabelDraft): Promise<PostResult> {
    this.calls.push({ tileId, draft: { ...draft } });
    return Promise.resolve(this.result);
  }
}

describe("keymap", () => {
  it("maps the numpad onto the location grid", () => {
    const byCode: Array<[string, LocationCell]> = [
      ["Numpad7", "top-left"],
      ["Numpad8", "top"],
      ["Numpad9", "top-right"],
      ["Numpad4", "left"],
      ["Numpad5", "center"],
      ["Numpad6", "right"],
      ["Numpad1", "bottom-left"],
      ["Numpad2", "bottom"],
      ["Numpad3", "bottom-right"],
    ];
    for (const [code, cell] of byCode) {
      expect(actionForKey(code)).toEqual({ kind: "set-location", cell });
    }
  });

  it("maps digits 1-4 onto quantity bins", () => {
    expect(actionForKey("Digit1")).toEqual({
      kind: "set-quantity",
      bin: "0 to 1",
    });
    expect(actionForKey("Digit2")).toEqual({
      kind: "set-quantity",
      bin: "1 to 5",
    });
    expect(actionForKey("Digit3")).toEqual({
      kind: "set-quantity",
      bin: "5 to 10",
    });
    expect(actionForKey("Digit4")).toEqual({
      kind: "set-quantity",
      bin: "10 to inf",
    });
  });

  it("binds space, enter and nothing else", () => {
    expect(actionForKey("Space")).toEqual({ kind: "toggle-presence" });
    expect(actionForKey("Enter")).toEqual({ kind: "submit" });
    expect(actionForKey("NumpadEnter")).toEqual({ kind: "submit" });
    for (const code of ["KeyA", "Digit5", "Numpad0", "Escape", "Tab"]) {
      expect(actionForKey(code)).toBeNull();
    }
  });
});

describe("session queue", () => {
  it("never contains already-labeled tiles", () => {
    const tiles = [entry("a"), entry("b", true), entry("c"), entry("d", true)];
    const session = new AnnotationSession(tiles, "demo");
    expect(session.remaining()).toBe(2);
    expect(session.currentTileId()).toBe("a");
  });

  it("filters to the requested region", () => {
    const other: TileEntry = { ...entry("z"), region: "elsewhere" };
    const session = new AnnotationSession([entry("a"), other], "demo");
    expect(session.remaining()).toBe(1);
  });

  it("refresh drops tiles labeled elsewhere and skips the current one", () => {
    const session = freshSession(3);
    expect(session.currentTileId()).toBe("t0");
    session.setPresence(true);
    session.refresh([entry("t0", true), entry("t1"), entry("t2")]);
    expect(session.currentTileId()).toBe("t1");
    expect(session.draft).toEqual(emptyDraft()); // stale draft discarded
    expect(session.completed).toBe(0);
  });

  it("refresh keeps position when the current tile is still free", () => {
    const session = freshSession(3);
    session.setPresence(true);
    session.refresh([entry("t0"), entry("t1"), entry("t2", true)]);
    expect(session.currentTileId()).toBe("t0");
    expect(session.draft.present).toBe(true); // draft preserved
    expect(session.remaining()).toBe(2);
  });
});

describe("label coupling", () => {
  it("turning presence off resets location and quantity to NA", () => {
    const session = freshSession();
    session.setPresence(true);
    session.setLocation("top-left");
    session.setQuantity("1 to 5");
    session.togglePresence();
    expect(session.draft).toEqual({
      present: false,
      location: "NA",
      quantity: "NA",
    });
  });

  it("ignores location and quantity while presence is off", () => {
    const session = freshSession();
    expect(session.detailsEnabled()).toBe(false);
    session.setLocation("center");
    session.setQuantity("5 to 10");
    expect(session.draft.location).toBe("NA");
    expect(session.draft.quantity).toBe("NA");
  });

  it("gates submit until a solar draft is fully specified", () => {
    const session = freshSession();
    expect(session.canSubmit()).toBe(true); // absent with NA/NA is valid
    session.setPresence(true);
    expect(session.canSubmit()).toBe(false);
    session.setLocation("bottom-right");
    expect(session.canSubmit()).toBe(false);
    session.setQuantity("10 to inf");
    expect(session.canSubmit()).toBe(true);
  });

  it("holds the coupling invariant under random action sequences", () => {
    // simple LCG so the fuzz is reproducible
    let seed = 0x2f6e2b1;
    const rand = () => {
      seed = (seed * 48271) % 2147483647;
      return seed / 2147483647;
    };
    const cells = LOCATION_GRID.flat();
    const actions: Array<() => KeyAction> = [
      () => ({ kind: "toggle-presence" }),
      () => ({
        kind: "set-location",
        cell: cells[Math.floor(rand() * cells.length)],
      }),
      () => ({
        kind: "set-quantity",
        bin: QUANTITY_CHOICES[
          Math.floor(rand() * QUANTITY_CHOICES.length)
        ] as QuantityBin,
      }),
    ];
    for (let run = 0; run < 500; run++) {
      const session = freshSession();
      for (let step = 0; step < 40; step++) {
        session.apply(actions[Math.floor(rand() * actions.length)]());
        const draft = session.draft;
        if (!draft.present) {
          // invalid couplings must be unrepresentable
          expect(draft.location).toBe("NA");
          expect(draft.quantity).toBe("NA");
        }
        if (session.canSubmit()) {
          const solarOk =
            draft.present &&
            draft.location !== "NA" &&
            draft.quantity !== "NA";
          const absentOk =
            !draft.present &&
            draft.location === "NA" &&
            draft.quantity === "NA";
          expect(solarOk || absentOk).toBe(true);
        }
      }
    }
  });
});

describe("submitCurrent", () => {
  it("posts the draft and advances on acceptance", async () => {
    const session = freshSession(2);
    const poster = new RecordingPoster();
    const outcome = await submitCurrent(session, poster);
    expect(outcome).toEqual({ kind: "accepted", tileId: "t0" });
    expect(poster.calls).toHaveLength(1);
    expect(poster.calls[0].tileId).toBe("t0");
    expect(session.completed).toBe(1);
    expect(session.currentTileId()).toBe("t1");
    expect(session.draft).toEqual(emptyDraft());
    expect(session.banner).toBeNull();
  });

  it("never calls the poster while the draft is incomplete", async () => {
    const session = freshSession();
    session.setPresence(true); // location/quantity still NA
    const poster = new RecordingPoster();
    const outcome = await submitCurrent(session, poster);
    expect(outcome.kind).toBe("blocked");
    expect(poster.calls).toHaveLength(0);
    expect(session.completed).toBe(0);
  });

  it("keeps the draft and shows the detail on a rejection", async () => {
    const session = freshSession();
    session.setPresence(true);
    session.setLocation("top");
    session.setQuantity("0 to 1");
    const poster = new RecordingPoster();
    poster.result = { ok: false, status: 422, detail: "no thanks" };
    const outcome = await submitCurrent(session, poster);
    expect(outcome.kind).toBe("rejected");
    expect(session.banner).toBe("no thanks");
    expect(session.draft.location).toBe("top"); // intact for retry
    expect(session.completed).toBe(0);
    expect(session.currentTileId()).toBe("t0");
  });

  it("treats transport failures as retryable, draft intact", async () => {
    const session = freshSession();
    const poster: LabelPoster = {
      postLabel: () => Promise.reject(new Error("connection refused")),
    };
    const outcome = await submitCurrent(session, poster);
    expect(outcome.kind).toBe("network");
    expect(session.banner).toContain("connection refused");
    expect(session.currentTileId()).toBe("t0");
  });

  it("runs the queue to completion", async () => {
    const session = freshSession(3);
    const poster = new RecordingPoster();
    for (let i = 0; i < 3; i++) {
      expect((await submitCurrent(session, poster)).kind).toBe("accepted");
    }
    expect(session.isComplete()).toBe(true);
    expect(session.completed).toBe(3);
    expect(session.canSubmit()).toBe(false);
    expect((await submitCurrent(session, poster)).kind).toBe("blocked");
    expect(poster.calls).toHaveLength(3);
  });
});
