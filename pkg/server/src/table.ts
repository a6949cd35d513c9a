import { readFileSync } from "node:fs";
import { basename } from "node:path";

import { BackendError, ModelBackend } from "./backend.js";

// Below any probability the protocol will ever care about, but finite so
// the vector survives JSON serialization. Clients floor at -30 nats anyway.
const ZERO_LOGPROB = -1e4;

export interface ParsedTable {
  vocabSize: number;
  rows: Map<string, number[]>;
  defaultRow: number[] | null;
  maxSuffix: number;
}

/** Parse the line-oriented table format: header `vocab <size>`, then
 * `row <ids|*> : <probs>` lines. Each row must sum to 1 within 1e-6. */
export function parseTable(text: string, source = "<table>"): ParsedTable {
  const lines = text
    .split(/\r?\n/)
    .map((ln) => ln.trim())
    .filter((ln) => ln.length > 0 && !ln.startsWith("#"));
  if (lines.length === 0) {
    throw new BackendError(`${source}: empty table file`);
  }
  const header = lines[0].split(/\s+/);
  if (header.length !== 2 || header[0] !== "vocab") {
    throw new BackendError(`${source}: first line must be 'vocab <size>'`);
  }
  const vocabSize = Number(header[1]);
  if (!Number.isInteger(vocabSize) || vocabSize < 2) {
    throw new BackendError(`${source}: bad vocab size ${header[1]}`);
  }

  const rows = new Map<string, number[]>();
  let defaultRow: number[] | null = null;
  let maxSuffix = 0;
  for (let i = 1; i < lines.length; i++) {
    const line = lines[i];
    if (!line.startsWith("row ")) {
      throw new BackendError(`${source}:${i + 1}: expected 'row ...'`);
    }
    const sep = line.indexOf(":");
    if (sep < 0) {
      throw new BackendError(`${source}:${i + 1}: missing ':' separator`);
    }
    const ctxPart = line.slice(4, sep).trim();
    const probStrs = line.slice(sep + 1).trim().split(/\s+/);
    if (probStrs.length !== vocabSize) {
      throw new BackendError(
        `${source}:${i + 1}: expected ${vocabSize} probabilities, got ${probStrs.length}`,
      );
    }
    const probs = probStrs.map(Number);
    if (probs.some((p) => !Number.isFinite(p) || p < 0)) {
      throw new BackendError(`${source}:${i + 1}: probabilities must be finite and >= 0`);
    }
    const total = probs.reduce((a, b) => a + b, 0);
    if (Math.abs(total - 1) > 1e-6) {
      throw new BackendError(`${source}:${i + 1}: probabilities sum to ${total}`);
    }
    if (ctxPart === "*") {
      defaultRow = probs;
      continue;
    }
    const ids = ctxPart.split(/\s+/).map(Number);
    if (ids.length === 0 || ids.some((t) => !Number.isInteger(t) || t < 0 || t >= vocabSize)) {
      throw new BackendError(`${source}:${i + 1}: bad context token ids '${ctxPart}'`);
    }
    rows.set(ids.join(" "), probs);
    maxSuffix = Math.max(maxSuffix, ids.length);
  }
  if (rows.size === 0 && defaultRow === null) {
    throw new BackendError(`${source}: table declares no rows`);
  }
  return { vocabSize, rows, defaultRow, maxSuffix };
}

/** Longest-suffix row match, falling back to the default row. */
export function lookupRow(table: ParsedTable, tokens: number[]): number[] {
  for (let k = Math.min(tokens.length, table.maxSuffix); k >= 1; k--) {
    const row = table.rows.get(tokens.slice(tokens.length - k).join(" "));
    if (row !== undefined) {
      return row;
    }
  }
  if (table.defaultRow !== null) {
    return table.defaultRow;
  }
  throw new BackendError("no row matches the context and no default row is declared");
}

export function rowLogprobs(row: number[]): number[] {
  return row.map((p) => (p > 0 ? Math.log(p) : ZERO_LOGPROB));
}

export class TableBackend implements ModelBackend {
  readonly name: string;
  readonly vocabSize: number;
  private readonly table: ParsedTable;

  constructor(table: ParsedTable, name: string) {
    this.table = table;
    this.name = name;
    this.vocabSize = table.vocabSize;
  }

  static fromFile(path: string): TableBackend {
    const table = parseTable(readFileSync(path, "utf-8"), path);
    return new TableBackend(table, basename(path).replace(/\.[^.]*$/, ""));
  }

  async logprobs(tokens: number[]): Promise<number[]> {
    return rowLogprobs(lookupRow(this.table, tokens));
  }
}
