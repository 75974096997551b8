/* tslint:disable */
/* eslint-disable */

/**
 * A routed byte model held by the page.
 */
export class Demo {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    context_length(): number;
    /**
     * Model from the bytes of a checkpoint written by `synergy train`.
     */
    static from_checkpoint(bytes: Uint8Array): Demo;
    k(): number;
    /**
     * Untrained model of the given preset (`tiny` or `desk`) with a
     * random router so that the picks are not all ties.
     */
    static random(preset: string, seed: bigint): Demo;
    /**
     * HTML fragment with one cell per byte of `text`, shaded by router
     * weight, picked bytes in bold. `routing` is `topk` or `threshold`.
     */
    render(text: string, routing: string): string;
    /**
     * Router weights and picks as JSON.
     */
    route_json(text: string, routing: string): string;
    trained(): boolean;
}

/**
 * FLOPs of the routed model against the dense baseline for a preset,
 * with the sequence length and k overridden. `baseline_tokens == 0`
 * means bytes / 4.25. Returns the report as JSON.
 */
export function flops_json(preset: string, seq_bytes: number, k: number, baseline_tokens: number): string;

/**
 * Names of the middle-stack positioning modes.
 */
export function positioning_modes(): string[];

/**
 * Routes a vector of router weights with top-k and reports the mask,
 * σ and the middle-stack position of every picked token under `mode`.
 */
export function positions_json(weights: Float64Array, k: number, mode: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_context_length: (a: number) => number;
    readonly demo_from_checkpoint: (a: number, b: number) => [number, number, number];
    readonly demo_k: (a: number) => number;
    readonly demo_random: (a: number, b: number, c: bigint) => [number, number, number];
    readonly demo_render: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_route_json: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_trained: (a: number) => number;
    readonly flops_json: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly positioning_modes: () => [number, number];
    readonly positions_json: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
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
