// Entry point: load the tile queue, wire keyboard and clicks, render.

import { ApiClient } from "./api.js";
import { actionForKey } from "./keymap.js";
import type { KeyAction } from "./keymap.js";
import { AnnotationSession, submitCurrent } from "./session.js";
import { renderApp } from "./ui.js";

async function boot(root: HTMLElement): Promise<void> {
  const api = new ApiClient("");
  const region = new URLSearchParams(window.location.search).get("region");
  const tiles = await api.allTiles(region ?? undefined);
  const session = new AnnotationSession(tiles, region);

  const ctx = {
    session,
    api,
    onAction(action: KeyAction): void {
      if (action.kind === "submit") {
        void submit();
        return;
      }
      session.apply(action);
      render();
    },
  };
  const render = () => renderApp(root, ctx);

  async function submit(): Promise<void> {
    if (!session.canSubmit()) return;
    const outcome = await submitCurrent(session, api);
    if (outcome.kind === "rejected") {
      // maybe labeled elsewhere; re-sync the queue before retrying
      try {
        session.refresh(await api.allTiles(region ?? undefined));
      } catch {
        // listing unavailable; keep the local queue
      }
    }
    render();
  }

  window.addEventListener("keydown", (event) => {
    const target = event.target;
    if (
      target instanceof HTMLInputElement ||
      target instanceof HTMLTextAreaElement
    ) {
      return;
    }
    const action = actionForKey(event.code);
    if (action) {
      event.preventDefault();
      ctx.onAction(action);
    }
  });

  render();
}

const root = document.getElementById("app");
if (root) {
  boot(root).catch((err) => {
    root.textContent = `failed to load tiles: ${err}`;
  });
}
