/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_bandview_free: (a: number, b: number) => void;
export const band_view: (a: number, b: number, c: number, d: number) => [number, number, number];
export const bandview_alphas: (a: number) => [number, number];
export const bandview_high_band: (a: number, b: number) => [number, number];
export const bandview_scales: (a: number) => number;
export const bandview_size: (a: number) => number;
export const bandview_spatial: (a: number) => [number, number];
export const bandview_spatial_size: (a: number) => number;
export const drift_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const drift_threshold: () => number;
export const synthesize: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
