/* tslint:disable */
/* eslint-disable */

export class Playground {
    free(): void;
    [Symbol.dispose](): void;
    fit(epochs: number, width: number, seed: bigint): Float64Array;
    isTrained(): boolean;
    constructor(components: number, n: number, seed: bigint);
    realPoints(): Float32Array;
    sample(n: number, steps: number, seed: bigint): Float32Array;
    trajectories(n: number, steps: number, seed: bigint): Float32Array;
}

export function scalingSweep(sizes: Uint32Array, trials: number, target_hr: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_playground_free: (a: number, b: number) => void;
    readonly playground_fit: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly playground_isTrained: (a: number) => number;
    readonly playground_new: (a: number, b: number, c: bigint) => [number, number, number];
    readonly playground_realPoints: (a: number) => [number, number];
    readonly playground_sample: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly playground_trajectories: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly scalingSweep: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
