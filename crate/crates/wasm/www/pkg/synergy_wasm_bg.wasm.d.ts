/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_context_length: (a: number) => number;
export const demo_from_checkpoint: (a: number, b: number) => [number, number, number];
export const demo_k: (a: number) => number;
export const demo_random: (a: number, b: number, c: bigint) => [number, number, number];
export const demo_render: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const demo_route_json: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const demo_trained: (a: number) => number;
export const flops_json: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const positioning_modes: () => [number, number];
export const positions_json: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_start: () => void;
