// Thin fetch client for the annotation API.

import type {
  LabelDraft,
  PostResult,
  Progress,
  TileEntry,
  TilePage,
  Vocab,
} from "./types.js";

function detailOf(body: unknown): string {
  if (body && typeof body === "object" && "detail" in body) {
    const detail = (body as { detail: unknown }).detail;
    return typeof detail === "string" ? detail : JSON.stringify(detail);
  }
  return JSON.stringify(body);
}

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(this.baseUrl + path);
    if (!resp.ok) {
      throw new Error(`GET ${path} failed: ${resp.status}`);
    }
    return (await resp.json()) as T;
  }

  vocab(): Promise<Vocab> {
    return this.getJson<Vocab>("/api/vocab");
  }

  listTiles(opts: {
    region?: string;
    status?: "unlabeled" | "labeled";
    offset?: number;
    limit?: number;
  } = {}): Promise<TilePage> {
    const params = new URLSearchParams();
    if (opts.region) params.set("region", opts.region);
    if (opts.status) params.set("status", opts.status);
    params.set("offset", String(opts.offset ?? 0));
    params.set("limit", String(opts.limit ?? 50));
    return this.getJson<TilePage>(`/api/tiles?${params}`);
  }

  /** Page through the whole listing. */
  async allTiles(
    region?: string,
    status?: "unlabeled" | "labeled",
  ): Promise<TileEntry[]> {
    const tiles: TileEntry[] = [];
    const limit = 200;
    for (let offset = 0; ; offset += limit) {
      const page = await this.listTiles({ region, status, offset, limit });
      tiles.push(...page.tiles);
      if (offset + limit >= page.total || page.tiles.length === 0) break;
    }
    return tiles;
  }

  tileImageUrl(tileId: string): string {
    return `${this.baseUrl}/api/tiles/${encodeURIComponent(tileId)}/image`;
  }

  async postLabel(
    tileId: string,
    draft: LabelDraft,
    annotatorId: string = "anonymous",
  ): Promise<PostResult> {
    let resp: Response;
    try {
      resp = await fetch(
        `${this.baseUrl}/api/tiles/${encodeURIComponent(tileId)}/label`,
        {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify({
            present: draft.present,
            location: draft.location,
            quantity: draft.quantity,
            annotator_id: annotatorId,
          }),
        },
      );
    } catch (err) {
      return { ok: false, status: 0, detail: String(err) };
    }
    if (resp.ok) {
      return { ok: true, label: await resp.json() };
    }
    let detail: string;
    try {
      detail = detailOf(await resp.json());
    } catch {
      detail = `HTTP ${resp.status}`;
    }
    return { ok: false, status: resp.status, detail };
  }

  progress(): Promise<Progress> {
    return this.getJson<Progress>("/api/progress");
  }
}
