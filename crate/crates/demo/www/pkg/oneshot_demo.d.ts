/* tslint:disable */
/* eslint-disable */

export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `[argmax x, argmax y, bdm x, bdm y, truth x, truth y]` in query pixels.
     */
    compare(x: number, y: number, k: number): Float64Array;
    constructor(seed: bigint, noise: number);
    queryPixels(): Uint8Array;
    similarityPixels(x: number, y: number): Uint8Array;
    templatePixels(): Uint8Array;
}

/**
 * RGBA pixels of a Gaussian target on a `grid x grid` map.
 */
export function gaussianTarget(grid: number, cx: number, cy: number, sigma: number): Uint8Array;

/**
 * Side length in pixels of every image the demo returns.
 */
export function side(): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly gaussianTarget: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly scene_compare: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly scene_new: (a: bigint, b: number) => [number, number, number];
    readonly scene_queryPixels: (a: number) => [number, number];
    readonly scene_similarityPixels: (a: number, b: number, c: number) => [number, number, number, number];
    readonly scene_templatePixels: (a: number) => [number, number];
    readonly side: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
