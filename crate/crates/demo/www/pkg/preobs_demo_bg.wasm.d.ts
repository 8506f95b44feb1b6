/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const exp_approx_error: (a: number, b: number, c: number) => [number, number];
export const noise_covariance: (a: number, b: number, c: number, d: number) => [number, number];
export const observer_convergence: (a: number, b: number, c: number, d: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
