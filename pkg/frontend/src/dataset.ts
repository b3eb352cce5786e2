/**
 * Tile dataset construction: one four-channel 32x32 tile per surveyed tree,
 * cropped from the imagery centered on the tree location.
 *
 * Tiles whose center is too close to the border for a full crop are skipped
 * (counted), and tiles whose mean NDVI is below zero are excluded (counted
 * separately) since they cover non-vegetation like buildings, roads, or
 * water. The remainder splits 70/15/15 into train/val/test, stratified per
 * class with a seeded shuffle.
 */

import * as fs from 'fs';
import * as path from 'path';

import { Grid, readGeoTiff } from './geotiff';
import { mulberry32, shuffled } from './rng';

export const TILE_SIZE = 32;
export const CHANNELS = 4;

export type Split = 'train' | 'val' | 'test';

export interface TileSample {
  /** channel-major (4 x 32 x 32) pixel values */
  data: Float32Array;
  label: number;
  split: Split;
  centerX: number;
  centerY: number;
}

export interface TileDataset {
  samples: TileSample[];
  classNames: Record<number, string>;
  skippedBorder: number;
  skippedNdvi: number;
  sourceImage: string;
}

export interface SurveyPoint {
  x: number;
  y: number;
  species: string;
}

export function readSurvey(csvPath: string): SurveyPoint[] {
  const text = fs.readFileSync(csvPath, 'utf-8');
  const lines = text.split('\n').filter((l) => l.trim().length > 0);
  const header = lines[0].trim().toLowerCase();
  if (header !== 'x,y,species') {
    throw new Error(`${csvPath}: expected header "x,y,species", got "${header}"`);
  }
  return lines.slice(1).map((line, i) => {
    const parts = line.split(',');
    if (parts.length !== 3) {
      throw new Error(`${csvPath}:${i + 2}: expected 3 columns`);
    }
    return { x: parseFloat(parts[0]), y: parseFloat(parts[1]),
             species: parts[2].trim() };
  });
}

export function readLabelMap(csvPath: string): Record<string, number> {
  // species table CSV: label,name,rho
  const text = fs.readFileSync(csvPath, 'utf-8');
  const lines = text.split('\n').filter((l) => l.trim().length > 0);
  const map: Record<string, number> = {};
  for (const line of lines.slice(1)) {
    const parts = line.split(',');
    if (parts.length >= 2) map[parts[1].trim()] = parseInt(parts[0], 10);
  }
  return map;
}

function cropTile(image: Grid, centerCol: number, centerRow: number):
    Float32Array | null {
  const half = TILE_SIZE / 2;
  const r0 = centerRow - half;
  const c0 = centerCol - half;
  if (r0 < 0 || c0 < 0 || r0 + TILE_SIZE > image.height
      || c0 + TILE_SIZE > image.width) {
    return null;
  }
  const plane = image.width * image.height;
  const out = new Float32Array(CHANNELS * TILE_SIZE * TILE_SIZE);
  for (let b = 0; b < CHANNELS; b++) {
    for (let r = 0; r < TILE_SIZE; r++) {
      for (let c = 0; c < TILE_SIZE; c++) {
        out[b * TILE_SIZE * TILE_SIZE + r * TILE_SIZE + c] =
          image.values[b * plane + (r0 + r) * image.width + (c0 + c)];
      }
    }
  }
  return out;
}

export function tileMeanNdvi(tile: Float32Array): number {
  const n = TILE_SIZE * TILE_SIZE;
  let sum = 0;
  for (let i = 0; i < n; i++) {
    const red = tile[i];
    const nir = tile[3 * n + i];
    const den = nir + red;
    sum += den === 0 ? 0 : (nir - red) / den;
  }
  return sum / n;
}

export function buildDataset(imagePath: string, surveyPath: string,
                             labelMap: Record<string, number>,
                             seed = 0): TileDataset {
  const image = readGeoTiff(imagePath);
  if (image.bands !== CHANNELS) {
    throw new Error(`${imagePath}: expected 4 bands, got ${image.bands}`);
  }
  const survey = readSurvey(surveyPath);

  const samples: TileSample[] = [];
  let skippedBorder = 0;
  let skippedNdvi = 0;
  for (const point of survey) {
    const label = labelMap[point.species];
    if (label === undefined) {
      throw new Error(`unknown species "${point.species}" in survey`);
    }
    const col = Math.floor((point.x - image.geo.originX) / image.geo.pixelSizeX);
    const row = Math.floor((image.geo.originY - point.y) / image.geo.pixelSizeY);
    const tile = cropTile(image, col, row);
    if (tile === null) {
      skippedBorder++;
      continue;
    }
    if (tileMeanNdvi(tile) < 0) {
      skippedNdvi++;
      continue;
    }
    samples.push({ data: tile, label, split: 'train',
                   centerX: point.x, centerY: point.y });
  }

  assignSplits(samples, seed);
  const classNames: Record<number, string> = {};
  for (const [name, label] of Object.entries(labelMap)) {
    classNames[label] = name;
  }
  return { samples, classNames, skippedBorder, skippedNdvi,
           sourceImage: path.resolve(imagePath) };
}

/** Stratified 70/15/15 split, deterministic for a given seed. */
export function assignSplits(samples: TileSample[], seed: number): void {
  const byLabel = new Map<number, number[]>();
  samples.forEach((s, i) => {
    const list = byLabel.get(s.label) ?? [];
    list.push(i);
    byLabel.set(s.label, list);
  });
  for (const label of [...byLabel.keys()].sort((a, b) => a - b)) {
    const rand = mulberry32(seed * 7919 + label);
    const order = shuffled(byLabel.get(label)!, rand);
    const nTrain = Math.round(order.length * 0.7);
    const nVal = Math.round(order.length * 0.15);
    order.forEach((idx, k) => {
      samples[idx].split = k < nTrain ? 'train'
        : k < nTrain + nVal ? 'val' : 'test';
    });
  }
}

export function ofSplit(dataset: TileDataset, split: Split): TileSample[] {
  return dataset.samples.filter((s) => s.split === split);
}

// On-disk form: meta.json + raw little-endian float32 tile data.
export function saveDataset(dataset: TileDataset, dir: string): void {
  fs.mkdirSync(dir, { recursive: true });
  const meta = {
    format: 'treecarbon-tiles',
    version: 1,
    tileSize: TILE_SIZE,
    channels: CHANNELS,
    count: dataset.samples.length,
    skippedBorder: dataset.skippedBorder,
    skippedNdvi: dataset.skippedNdvi,
    classNames: dataset.classNames,
    sourceImage: dataset.sourceImage,
    samples: dataset.samples.map((s) => ({
      label: s.label, split: s.split, centerX: s.centerX, centerY: s.centerY,
    })),
  };
  fs.writeFileSync(path.join(dir, 'meta.json'),
                   JSON.stringify(meta, null, 2) + '\n');
  const stride = CHANNELS * TILE_SIZE * TILE_SIZE;
  const all = new Float32Array(dataset.samples.length * stride);
  dataset.samples.forEach((s, i) => all.set(s.data, i * stride));
  fs.writeFileSync(path.join(dir, 'tiles.f32'), Buffer.from(all.buffer));
}

export function loadDataset(dir: string): TileDataset {
  const meta = JSON.parse(
    fs.readFileSync(path.join(dir, 'meta.json'), 'utf-8'));
  if (meta.format !== 'treecarbon-tiles' || meta.version !== 1) {
    throw new Error(`${dir}: not a tile dataset (or unsupported version)`);
  }
  const raw = fs.readFileSync(path.join(dir, 'tiles.f32'));
  const all = new Float32Array(raw.buffer, raw.byteOffset,
                               raw.byteLength / 4);
  const stride = CHANNELS * TILE_SIZE * TILE_SIZE;
  const samples: TileSample[] = meta.samples.map((m: any, i: number) => ({
    data: all.slice(i * stride, (i + 1) * stride),
    label: m.label, split: m.split, centerX: m.centerX, centerY: m.centerY,
  }));
  const classNames: Record<number, string> = {};
  for (const [k, v] of Object.entries(meta.classNames)) {
    classNames[parseInt(k, 10)] = v as string;
  }
  return { samples, classNames, skippedBorder: meta.skippedBorder,
           skippedNdvi: meta.skippedNdvi, sourceImage: meta.sourceImage };
}
