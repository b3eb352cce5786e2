/**
 * Seeded synthetic tile generator for benchmarks: each species is a
 * four-channel spectral signature with per-pixel speckle and sensor noise,
 * mirroring how the core pipeline's synthetic scenes paint crowns.
 */

import { CHANNELS, TILE_SIZE, TileDataset, TileSample, assignSplits } from './dataset';
import { gaussian, mulberry32 } from './rng';

export const DEFAULT_SIGNATURES: Record<number, [number, number, number, number]> = {
  0: [0.10, 0.32, 0.15, 0.68],
  1: [0.13, 0.28, 0.13, 0.74],
  2: [0.08, 0.36, 0.18, 0.62],
  3: [0.11, 0.30, 0.20, 0.70],
};

export function makeSyntheticTiles(perClass: number, seed: number,
                                   speckle = 0.06,
                                   signatures = DEFAULT_SIGNATURES): TileDataset {
  const rand = mulberry32(seed);
  const noise = gaussian(rand);
  const samples: TileSample[] = [];
  const plane = TILE_SIZE * TILE_SIZE;
  const classNames: Record<number, string> = {};
  for (const key of Object.keys(signatures).map(Number).sort((a, b) => a - b)) {
    classNames[key] = `class-${key}`;
    const sig = signatures[key];
    for (let i = 0; i < perClass; i++) {
      const data = new Float32Array(CHANNELS * plane);
      for (let p = 0; p < plane; p++) {
        const s = noise() * speckle;
        for (let c = 0; c < CHANNELS; c++) {
          const v = sig[c] + s + noise() * 0.01;
          data[c * plane + p] = Math.min(1, Math.max(0, v));
        }
      }
      samples.push({ data, label: key, split: 'train',
                     centerX: 0, centerY: 0 });
    }
  }
  assignSplits(samples, seed);
  return { samples, classNames, skippedBorder: 0, skippedNdvi: 0,
           sourceImage: '(synthetic)' };
}
