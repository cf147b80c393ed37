/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const gaussianTarget: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const scene_compare: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const scene_new: (a: bigint, b: number) => [number, number, number];
export const scene_queryPixels: (a: number) => [number, number];
export const scene_similarityPixels: (a: number, b: number, c: number) => [number, number, number, number];
export const scene_templatePixels: (a: number) => [number, number];
export const side: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
