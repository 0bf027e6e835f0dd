// Annotation session state machine.
//
// Pure state, no DOM and no transport: the UI renders from it and the
// API layer feeds submit outcomes back in. The invariant this module
// owns is label coupling: a draft with present=false always carries
// location=NA and quantity=NA, so an inconsistent label can never
// reach the server. Location and quantity setters are ignored while
// presence is off (the controls are disabled); submit is gated on
// canSubmit().

import type { KeyAction } from "./keymap.js";
import type {
  LabelDraft,
  LocationCell,
  PostResult,
  QuantityBin,
  TileEntry,
} from "./types.js";
import { NA } from "./types.js";

export function emptyDraft(): LabelDraft {
  return { present: false, location: NA, quantity: NA };
}

export type SubmitOutcome =
  | { kind: "accepted"; tileId: string }
  | { kind: "rejected"; detail: string }
  | { kind: "network"; detail: string }
  | { kind: "blocked" };

export interface LabelPoster {
  postLabel(tileId: string, draft: LabelDraft): Promise<PostResult>;
}

export class AnnotationSession {
  readonly region: string | null;
  private queue: string[];
  private pos = 0;
  draft: LabelDraft = emptyDraft();
  completed = 0;
  banner: string | null = null;

  constructor(tiles: TileEntry[], region: string | null = null) {
    this.region = region;
    // the queue never contains already-labeled tiles
    this.queue = tiles
      .filter((t) => t.label === null)
      .filter((t) => region === null || t.region === region)
      .map((t) => t.tile_id);
  }

  currentTileId(): string | null {
    return this.pos < this.queue.length ? this.queue[this.pos] : null;
  }

  remaining(): number {
    return Math.max(0, this.queue.length - this.pos);
  }

  isComplete(): boolean {
    return this.pos >= this.queue.length;
  }

  presenceOn(): boolean {
    return this.draft.present;
  }

  /** Location and quantity controls are live only while presence is on. */
  detailsEnabled(): boolean {
    return this.draft.present;
  }

  togglePresence(): void {
    this.setPresence(!this.draft.present);
  }

  setPresence(value: boolean): void {
    this.draft.present = value;
    if (!value) {
      this.draft.location = NA;
      this.draft.quantity = NA;
    }
  }

  setLocation(cell: LocationCell): void {
    if (!this.draft.present || cell === NA) return; // control disabled
    this.draft.location = cell;
  }

  setQuantity(bin: QuantityBin): void {
    if (!this.draft.present || bin === NA) return; // control disabled
    this.draft.quantity = bin;
  }

  /** True exactly when the draft is a label the server will accept. */
  canSubmit(): boolean {
    if (this.isComplete()) return false;
    if (!this.draft.present) return true; // NA/NA by construction
    return this.draft.location !== NA && this.draft.quantity !== NA;
  }

  apply(action: KeyAction): void {
    switch (action.kind) {
      case "toggle-presence":
        this.togglePresence();
        break;
      case "set-location":
        this.setLocation(action.cell);
        break;
      case "set-quantity":
        this.setQuantity(action.bin);
        break;
      case "submit":
        break; // transport concern; see submitCurrent
    }
  }

  /** Record the server's verdict on the current draft. */
  recordOutcome(outcome: SubmitOutcome): void {
    switch (outcome.kind) {
      case "accepted":
        this.completed += 1;
        this.pos += 1;
        this.draft = emptyDraft();
        this.banner = null;
        break;
      case "rejected":
      case "network":
        this.banner = outcome.detail; // draft stays intact for retry
        break;
      case "blocked":
        break;
    }
  }

  /**
   * Re-sync the queue against a fresh tile listing. Tiles labeled
   * elsewhere in the meantime are dropped; if that includes the
   * current tile, the session skips ahead without losing its count.
   */
  refresh(tiles: TileEntry[]): void {
    const current = this.currentTileId();
    const unlabeled = new Set(
      tiles.filter((t) => t.label === null).map((t) => t.tile_id),
    );
    const done = this.queue.slice(0, this.pos);
    const ahead = this.queue.slice(this.pos).filter((id) => unlabeled.has(id));
    this.queue = done.concat(ahead);
    this.pos = done.length;
    if (current !== null && this.currentTileId() !== current) {
      this.draft = emptyDraft(); // current tile was taken; skip it
    }
  }
}

/** Submit the current draft through a poster, enforcing the gate. */
export async function submitCurrent(
  session: AnnotationSession,
  poster: LabelPoster,
): Promise<SubmitOutcome> {
  const tileId = session.currentTileId();
  if (tileId === null || !session.canSubmit()) {
    const outcome: SubmitOutcome = { kind: "blocked" };
    session.recordOutcome(outcome);
    return outcome;
  }
  let result: PostResult;
  try {
    result = await poster.postLabel(tileId, session.draft);
  } catch (err) {
    const outcome: SubmitOutcome = { kind: "network", detail: String(err) };
    session.recordOutcome(outcome);
    return outcome;
  }
  const outcome: SubmitOutcome = result.ok
    ? { kind: "accepted", tileId }
    : result.status === 0
      ? { kind: "network", detail: result.detail }
      : { kind: "rejected", detail: result.detail };
  session.recordOutcome(outcome);
  return outcome;
}
