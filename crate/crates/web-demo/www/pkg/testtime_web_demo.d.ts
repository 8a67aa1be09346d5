/* tslint:disable */
/* eslint-disable */

/**
 * One Best-of-N batch from the stock synthetic policy, as JSONL.
 */
export function demo_records(seed: number, k: number): string;

/**
 * Scaling curve from per-cell fast counts, plus the equivalent K of `target`
 * when it lies in (0, 1].
 */
export function scaling_curve(cells: string, ks: string, target: number): string;

/**
 * Runs every selection strategy over JSONL records, one unit per
 * `(task, seed)`.
 */
export function select_records(jsonl: string, seed: number): string;

/**
 * Adaptation loop on the stock synthetic policy: per-step batch score and
 * expert-tail mass, plus the step Best-of-Adaptation keeps.
 */
export function simulate_adaptation(seed: number, k: number, steps: number, learning_rate: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly demo_records: (a: number, b: number) => [number, number, number, number];
    readonly scaling_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly select_records: (a: number, b: number, c: number) => [number, number, number, number];
    readonly simulate_adaptation: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
