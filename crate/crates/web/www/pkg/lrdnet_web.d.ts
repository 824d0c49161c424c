/* tslint:disable */
/* eslint-disable */

export class BandView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    alphas(): Float64Array;
    high_band(scale: number): Uint8Array;
    scales(): number;
    size(): number;
    spatial(): Uint8Array;
    spatial_size(): number;
}

export function band_view(seed: number, kind: string, size: number): BandView;

export function drift_curve(mu: number, steps: number, noise: number, batch: number, seed: number): Float64Array;

/**
 * Drift threshold used by the training loss.
 */
export function drift_threshold(): number;

/**
 * RGBA pixels of a synthetic image.
 */
export function synthesize(seed: number, kind: string, size: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_bandview_free: (a: number, b: number) => void;
    readonly band_view: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly bandview_alphas: (a: number) => [number, number];
    readonly bandview_high_band: (a: number, b: number) => [number, number];
    readonly bandview_scales: (a: number) => number;
    readonly bandview_size: (a: number) => number;
    readonly bandview_spatial: (a: number) => [number, number];
    readonly bandview_spatial_size: (a: number) => number;
    readonly drift_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly drift_threshold: () => number;
    readonly synthesize: (a: number, b: number, c: number, d: number) => [number, number, number, number];
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
