/* tslint:disable */
/* eslint-disable */

/**
 * Max-normalized ERF, `side × side` row-major. `kind` is `ncssd` or
 * `dwconv`.
 */
export function erf_grid(kind: string, side: number, seed: number): Float64Array;

/**
 * `|F|` for a single-head, single-channel sequence of `len` tokens,
 * `len × len` row-major. `kind` is `causal` or `ncssd`.
 */
export function mixing_matrix(kind: string, len: number, seed: number): Float64Array;

/**
 * One line per scan route: name, NC-SSD diff, causal diff.
 */
export function route_consistency(h: number, w: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly erf_grid: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly mixing_matrix: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly route_consistency: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
