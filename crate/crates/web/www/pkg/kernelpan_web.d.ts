/* tslint:disable */
/* eslint-disable */

export class Exploration {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    fused_things(): number;
    pq(): number;
    /**
     * JSON with candidate, cluster and segment counts and PQ.
     */
    report(): string;
    /**
     * Merged labels, colorized, as RGBA bytes.
     */
    rgba(): Uint8Array;
}

export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Runs fusion and merging on kernels drawn around the ground truth.
     *
     * `noise` is the std-dev of Gaussian noise added to every candidate
     * kernel; `fuse_thresh` is the cosine threshold; `argmax` picks the
     * per-pixel argmax merge instead of the score-ordered heuristic.
     */
    explore(noise: number, fuse_thresh: number, argmax: boolean, noise_seed: bigint): Exploration;
    height(): number;
    /**
     * Input image as RGBA bytes.
     */
    image_rgba(): Uint8Array;
    /**
     * Ground-truth panoptic labels, colorized, as RGBA bytes.
     */
    label_rgba(): Uint8Array;
    /**
     * A 64x64 scene with up to `max_things` objects.
     */
    constructor(seed: bigint, max_things: number);
    stage_count(): number;
    stage_height(stage: number): number;
    stage_width(stage: number): number;
    /**
     * JSON summary of the scene and its stage assignment.
     */
    summary(): string;
    /**
     * Stage targets at stage resolution: stuff classes tinted by their soft
     * one-hot target, thing center heatmaps blended on top, assigned
     * centers in white.
     */
    targets_rgba(stage: number): Uint8Array;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_exploration_free: (a: number, b: number) => void;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly exploration_fused_things: (a: number) => number;
    readonly exploration_pq: (a: number) => number;
    readonly exploration_report: (a: number) => [number, number];
    readonly exploration_rgba: (a: number) => [number, number];
    readonly scene_explore: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
    readonly scene_height: (a: number) => number;
    readonly scene_image_rgba: (a: number) => [number, number];
    readonly scene_label_rgba: (a: number) => [number, number];
    readonly scene_new: (a: bigint, b: number) => [number, number, number];
    readonly scene_stage_count: (a: number) => number;
    readonly scene_stage_height: (a: number, b: number) => number;
    readonly scene_stage_width: (a: number, b: number) => number;
    readonly scene_summary: (a: number) => [number, number];
    readonly scene_targets_rgba: (a: number, b: number) => [number, number, number, number];
    readonly scene_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
