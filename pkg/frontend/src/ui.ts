// DOM rendering for the annotation tool.
//
// Render is a full redraw from session state; all mutations flow
// through the single onAction handler so clicks and keystrokes share
// one code path. Location and quantity controls carry the disabled
// attribute whenever presence is off, and the submit button whenever
// the draft is not submittable, so invalid labels are unreachable
// from the page.

import type { ApiClient } from "./api.js";
import type { KeyAction } from "./keymap.js";
import type { AnnotationSession } from "./session.js";
import type { LocationCell, QuantityBin } from "./types.js";
import { LOCATION_GRID, QUANTITY_CHOICES } from "./types.js";

export interface UiContext {
  session: AnnotationSession;
  api: ApiClient;
  onAction(action: KeyAction): void;
}

/**
 * Everything the DOM layer needs to set attributes, derived in one
 * place so the disable rules are testable without a browser.
 */
export interface ControlState {
  tileId: string | null;
  presenceOn: boolean;
  locationDisabled: boolean;
  quantityDisabled: boolean;
  submitDisabled: boolean;
  activeCell: LocationCell;
  activeBin: QuantityBin;
  banner: string | null;
  done: number;
  left: number;
}

export function controlState(session: AnnotationSession): ControlState {
  const enabled = session.detailsEnabled();
  return {
    tileId: session.currentTileId(),
    presenceOn: session.presenceOn(),
    locationDisabled: !enabled,
    quantityDisabled: !enabled,
    submitDisabled: !session.canSubmit(),
    activeCell: session.draft.location,
    activeBin: session.draft.quantity,
    banner: session.banner,
    done: session.completed,
    left: session.remaining(),
  };
}

const NUMPAD_HINTS: Record<string, string> = {
  "top-left": "7",
  top: "8",
  "top-right": "9",
  left: "4",
  center: "5",
  right: "6",
  "bottom-left": "1",
  bottom: "2",
  "bottom-right": "3",
};

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function button(label: string, className: string): HTMLButtonElement {
  const btn = el("button", className, label);
  btn.type = "button";
  return btn;
}

function header(ctx: UiContext, state: ControlState): HTMLElement {
  const head = el("header", "top-bar");
  head.appendChild(el("h1", undefined, "tile labeling"));
  const scope = ctx.session.region ?? "all regions";
  head.appendChild(el("span", "scope", scope));
  head.appendChild(
    el("span", "tally", `${state.done} done · ${state.left} left`),
  );
  return head;
}

function tileFigure(ctx: UiContext, tileId: string): HTMLElement {
  const figure = el("figure", "tile-figure");
  const img = el("img", "tile-image");
  img.alt = `tile ${tileId}`;
  img.src = ctx.api.tileImageUrl(tileId);
  figure.appendChild(img);
  img.addEventListener("error", () => {
    if (figure.querySelector(".image-error")) return;
    const overlay = el("div", "image-error");
    overlay.appendChild(el("p", undefined, "image failed to load"));
    const retry = button("retry", "retry");
    retry.addEventListener("click", () => {
      overlay.remove();
      img.src = `${ctx.api.tileImageUrl(tileId)}?retry=${Date.now()}`;
    });
    overlay.appendChild(retry);
    figure.appendChild(overlay);
  });
  const caption = el("figcaption", "tile-id", tileId);
  figure.appendChild(caption);
  return figure;
}

function presenceControl(ctx: UiContext, state: ControlState): HTMLElement {
  const wrap = el("div", "control-row");
  wrap.appendChild(el("span", "control-label", "solar panels"));
  const toggle = button(
    state.presenceOn ? "present" : "not present",
    "presence-toggle",
  );
  toggle.id = "presence-toggle";
  toggle.setAttribute("aria-pressed", String(state.presenceOn));
  toggle.addEventListener("click", () =>
    ctx.onAction({ kind: "toggle-presence" }),
  );
  wrap.appendChild(toggle);
  wrap.appendChild(el("kbd", undefined, "space"));
  return wrap;
}

function locationControl(ctx: UiContext, state: ControlState): HTMLElement {
  const wrap = el("div", "control-row");
  const label = state.locationDisabled ? "location: NA" : "location";
  wrap.appendChild(el("span", "control-label", label));
  const grid = el("div", "location-grid");
  for (const gridRow of LOCATION_GRID) {
    const rowEl = el("div", "grid-row");
    for (const cell of gridRow) {
      const btn = button(cell, "cell");
      btn.dataset.cell = cell;
      btn.disabled = state.locationDisabled;
      if (state.activeCell === cell) btn.classList.add("active");
      btn.appendChild(el("kbd", undefined, NUMPAD_HINTS[cell]));
      btn.addEventListener("click", () =>
        ctx.onAction({ kind: "set-location", cell: cell as LocationCell }),
      );
      rowEl.appendChild(btn);
    }
    grid.appendChild(rowEl);
  }
  wrap.appendChild(grid);
  return wrap;
}

function quantityControl(ctx: UiContext, state: ControlState): HTMLElement {
  const wrap = el("div", "control-row");
  const label = state.quantityDisabled ? "panel count: NA" : "panel count";
  wrap.appendChild(el("span", "control-label", label));
  const row = el("div", "quantity-row");
  QUANTITY_CHOICES.forEach((bin, i) => {
    const btn = button(bin, "bin");
    btn.dataset.qty = bin;
    btn.disabled = state.quantityDisabled;
    if (state.activeBin === bin) btn.classList.add("active");
    btn.appendChild(el("kbd", undefined, String(i + 1)));
    btn.addEventListener("click", () =>
      ctx.onAction({ kind: "set-quantity", bin: bin as QuantityBin }),
    );
    row.appendChild(btn);
  });
  wrap.appendChild(row);
  return wrap;
}

function submitControl(ctx: UiContext, state: ControlState): HTMLElement {
  const wrap = el("div", "control-row submit-row");
  const btn = button("save label", "submit");
  btn.id = "submit";
  btn.disabled = state.submitDisabled;
  btn.addEventListener("click", () => ctx.onAction({ kind: "submit" }));
  wrap.appendChild(btn);
  wrap.appendChild(el("kbd", undefined, "enter"));
  return wrap;
}

function completionView(ctx: UiContext): HTMLElement {
  const done = el("section", "completion");
  done.appendChild(el("h2", undefined, "all tiles labeled"));
  const table = el("table", "progress-table");
  const head = el("tr");
  for (const col of ["region", "labeled", "total"]) {
    head.appendChild(el("th", undefined, col));
  }
  table.appendChild(head);
  done.appendChild(table);
  ctx.api
    .progress()
    .then((progress) => {
      for (const [name, row] of Object.entries(progress.regions)) {
        const tr = el("tr");
        tr.appendChild(el("td", undefined, name));
        tr.appendChild(el("td", undefined, String(row.labeled)));
        tr.appendChild(el("td", undefined, String(row.total)));
        table.appendChild(tr);
      }
    })
    .catch(() => {
      done.appendChild(el("p", "banner", "progress unavailable"));
    });
  return done;
}

export function renderApp(root: HTMLElement, ctx: UiContext): void {
  const state = controlState(ctx.session);
  root.textContent = "";
  root.appendChild(header(ctx, state));
  if (state.banner) {
    root.appendChild(el("div", "banner", state.banner));
  }
  if (state.tileId === null) {
    root.appendChild(completionView(ctx));
    return;
  }
  const card = el("main", "tile-card");
  card.appendChild(tileFigure(ctx, state.tileId));
  const controls = el("section", "controls");
  controls.appendChild(presenceControl(ctx, state));
  controls.appendChild(locationControl(ctx, state));
  controls.appendChild(quantityControl(ctx, state));
  controls.appendChild(submitControl(ctx, state));
  card.appendChild(controls);
  root.appendChild(card);
}
