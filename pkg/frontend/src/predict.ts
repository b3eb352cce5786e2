/**
 * Species-map inference: dice the imagery into non-overlapping 32x32 tiles,
 * classify each, and paint its label over the tile footprint. Tiles with
 * mean NDVI below zero stay unclassified (nodata), matching the dataset
 * filter. The output raster covers the complete-tile footprint
 * (floor(size/32) tiles per axis) and keeps the input georeferencing.
 */

import * as tf from '@tensorflow/tfjs';

import { CHANNELS, TILE_SIZE, tileMeanNdvi } from './dataset';
import { Grid } from './geotiff';
import { initBackend } from './model';

export const UNCLASSIFIED = -1;

export interface SpeciesMap {
  grid: Grid;
  tilesAcross: number;
  tilesDown: number;
  classified: number;
  ndviFiltered: number;
}

export async function predictMap(model: tf.LayersModel, classes: number[],
                                 image: Grid,
                                 batchSize = 64): Promise<SpeciesMap> {
  await initBackend();
  if (image.bands !== CHANNELS) {
    throw new Error(`expected ${CHANNELS}-band imagery, got ${image.bands}`);
  }
  const across = Math.floor(image.width / TILE_SIZE);
  const down = Math.floor(image.height / TILE_SIZE);
  if (across === 0 || down === 0) {
    throw new Error(
      `image ${image.width}x${image.height} smaller than one `
      + `${TILE_SIZE}x${TILE_SIZE} tile`);
  }

  const outWidth = across * TILE_SIZE;
  const outHeight = down * TILE_SIZE;
  const plane = image.width * image.height;
  const tilePlane = TILE_SIZE * TILE_SIZE;

  const tiles: Array<{ index: number; data: Float32Array }> = [];
  let ndviFiltered = 0;
  const labels = new Int32Array(across * down).fill(UNCLASSIFIED);

  for (let tr = 0; tr < down; tr++) {
    for (let tc = 0; tc < across; tc++) {
      const data = new Float32Array(CHANNELS * tilePlane);
      for (let b = 0; b < CHANNELS; b++) {
        for (let r = 0; r < TILE_SIZE; r++) {
          for (let c = 0; c < TILE_SIZE; c++) {
            data[b * tilePlane + r * TILE_SIZE + c] =
              image.values[b * plane + (tr * TILE_SIZE + r) * image.width
                           + (tc * TILE_SIZE + c)];
          }
        }
      }
      if (tileMeanNdvi(data) < 0) {
        ndviFiltered++;
        continue;
      }
      tiles.push({ index: tr * across + tc, data });
    }
  }

  for (let i = 0; i < tiles.length; i += batchSize) {
    const batch = tiles.slice(i, i + batchSize);
    const feed = new Float32Array(batch.length * tilePlane * CHANNELS);
    batch.forEach((t, k) => {
      const base = k * tilePlane * CHANNELS;
      for (let p = 0; p < tilePlane; p++) {
        for (let c = 0; c < CHANNELS; c++) {
          feed[base + p * CHANNELS + c] = t.data[c * tilePlane + p];
        }
      }
    });
    const xs = tf.tensor4d(feed, [batch.length, TILE_SIZE, TILE_SIZE, CHANNELS]);
    const pred = model.predict(xs) as tf.Tensor2D;
    const idx = await pred.argMax(-1).data();
    batch.forEach((t, k) => { labels[t.index] = classes[idx[k]]; });
    xs.dispose(); pred.dispose();
  }

  const values = new Float32Array(outWidth * outHeight);
  for (let tr = 0; tr < down; tr++) {
    for (let tc = 0; tc < across; tc++) {
      const label = labels[tr * across + tc];
      for (let r = 0; r < TILE_SIZE; r++) {
        const rowBase = (tr * TILE_SIZE + r) * outWidth + tc * TILE_SIZE;
        values.fill(label, rowBase, rowBase + TILE_SIZE);
      }
    }
  }

  const grid: Grid = {
    width: outWidth,
    height: outHeight,
    bands: 1,
    values,
    geo: { ...image.geo },
    crsId: image.crsId,
    nodata: UNCLASSIFIED,
  };
  return {
    grid, tilesAcross: across, tilesDown: down,
    classified: tiles.length, ndviFiltered,
  };
}
