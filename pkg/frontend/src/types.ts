// Wire types for the labeling API served by the pipeline binary.

export type LocationCell =
  | "left"
  | "right"
  | "bottom"
  | "top"
  | "top-left"
  | "top-right"
  | "bottom-right"
  | "bottom-left"
  | "center"
  | "NA";

export type QuantityBin = "0 to 1" | "1 to 5" | "5 to 10" | "10 to inf" | "NA";

export const NA = "NA";

// 3x3 picker layout, mirroring the spatial grid the labels use.
export const LOCATION_GRID: LocationCell[][] = [
  ["top-left", "top", "top-right"],
  ["left", "center", "right"],
  ["bottom-left", "bottom", "bottom-right"],
];

export const QUANTITY_CHOICES: QuantityBin[] = [
  "0 to 1",
  "1 to 5",
  "5 to 10",
  "10 to inf",
];

export interface Vocab {
  locations: string[];
  quantities: string[];
}

export interface TileLabelOut {
  present: boolean;
  location: string;
  quantity: string;
  annotator_id: string;
}

export interface TileEntry {
  tile_id: string;
  region: string;
  row: number;
  col: number;
  label: TileLabelOut | null;
}

export interface TilePage {
  total: number;
  offset: number;
  limit: number;
  tiles: TileEntry[];
}

export interface LabelDraft {
  present: boolean;
  location: LocationCell;
  quantity: QuantityBin;
}

export interface RegionProgress {
  total: number;
  labeled: number;
}

export interface Progress {
  total: number;
  labeled: number;
  remaining: number;
  regions: Record<string, RegionProgress>;
}

export type PostResult =
  | { ok: true; label: TileLabelOut & { tile_id: string } }
  | { ok: false; status: number; detail: string };
