/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_playground_free: (a: number, b: number) => void;
export const playground_fit: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const playground_isTrained: (a: number) => number;
export const playground_new: (a: number, b: number, c: bigint) => [number, number, number];
export const playground_realPoints: (a: number) => [number, number];
export const playground_sample: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const playground_trajectories: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const scalingSweep: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
