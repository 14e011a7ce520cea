/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_exploration_free: (a: number, b: number) => void;
export const __wbg_scene_free: (a: number, b: number) => void;
export const exploration_fused_things: (a: number) => number;
export const exploration_pq: (a: number) => number;
export const exploration_report: (a: number) => [number, number];
export const exploration_rgba: (a: number) => [number, number];
export const scene_explore: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
export const scene_height: (a: number) => number;
export const scene_image_rgba: (a: number) => [number, number];
export const scene_label_rgba: (a: number) => [number, number];
export const scene_new: (a: bigint, b: number) => [number, number, number];
export const scene_stage_count: (a: number) => number;
export const scene_stage_height: (a: number, b: number) => number;
export const scene_stage_width: (a: number, b: number) => number;
export const scene_summary: (a: number) => [number, number];
export const scene_targets_rgba: (a: number, b: number) => [number, number, number, number];
export const scene_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
