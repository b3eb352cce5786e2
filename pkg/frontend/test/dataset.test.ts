import assert from 'node:assert/strict';
import { execFileSync } from 'node:child_process';
import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';
import { before, test } from 'node:test';

import { CHANNELS, TILE_SIZE, buildDataset, loadDataset, ofSplit,
         readLabelMap, readSurvey, saveDataset,
         tileMeanNdvi } from '../src/dataset';
import { Grid, writeGeoTiff } from '../src/geotiff';

let dir: string;
let imagePath: string;
let surveyPath: string;
let tablePath: string;

before(() => {
  dir = fs.mkdtempSync(path.join(os.tmpdir(), 'tcds-'));
  const sceneSpec = {
    extent_m: 150.0, tree_count: 40,
    species_frequencies: { '0': 0.4, '1': 0.25, '2': 0.2, '3': 0.15 },
    diameter_range: [4.0, 8.0],
    allometry: { '0': [1.6, 2.0], '1': [1.4, 3.0], '2': [1.8, 1.5],
                 '3': [1.5, 2.5] },
    signatures: { '0': [0.10, 0.32, 0.15, 0.68], '1': [0.13, 0.28, 0.13, 0.74],
                  '2': [0.08, 0.36, 0.18, 0.62], '3': [0.11, 0.30, 0.20, 0.70] },
    seed: 88,
  };
  fs.writeFileSync(path.join(dir, 'scene.json'), JSON.stringify(sceneSpec));
  tablePath = path.join(dir, 'species.csv');
  fs.writeFileSync(tablePath,
    'label,name,rho\n0,London plane tree,560\n1,Honeylocust,755\n'
    + '2,Callery pear,690\n3,Pin oak,705\n');
  execFileSync('treecarbon', ['synth', 'generate',
    '--spec', path.join(dir, 'scene.json'), '--table', tablePath,
    '--out', path.join(dir, 'demo')], { stdio: 'pipe' });
  imagePath = path.join(dir, 'demo', 'imagery.tif');
  surveyPath = path.join(dir, 'demo', 'survey.csv');
});

test('every survey point is accounted for: tiles + skips', () => {
  const labelMap = readLabelMap(tablePath);
  const survey = readSurvey(surveyPath);
  const ds = buildDataset(imagePath, surveyPath, labelMap, 1);
  assert.equal(ds.samples.length + ds.skippedBorder + ds.skippedNdvi,
               survey.length);
  for (const s of ds.samples) {
    assert.equal(s.data.length, CHANNELS * TILE_SIZE * TILE_SIZE);
  }
});

test('tree too near the border is skipped and counted', () => {
  // hand-built image: one survey point 5 px from the edge
  const width = 64; const height = 64;
  const values = new Float32Array(width * height * 4).fill(0.5);
  const grid: Grid = {
    width, height, bands: 4, values,
    geo: { originX: 0, originY: height * 0.6, pixelSizeX: 0.6, pixelSizeY: 0.6 },
    crsId: 32618, nodata: null,
  };
  const img = path.join(dir, 'border.tif');
  writeGeoTiff(grid, img);
  const survey = path.join(dir, 'border_survey.csv');
  // x=3 m -> col 5: closer to the left edge than a half tile (16 px)
  fs.writeFileSync(survey, 'x,y,species\n3.0,19.2,Pin oak\n19.2,19.2,Pin oak\n');
  const ds = buildDataset(img, survey, { 'Pin oak': 3 }, 0);
  assert.equal(ds.skippedBorder, 1);
  assert.equal(ds.samples.length, 1);
});

test('bare-soil tile (mean NDVI < 0) is excluded', () => {
  const width = 64; const height = 64;
  const values = new Float32Array(width * height * 4);
  const plane = width * height;
  // left half bare (red > nir), right half vegetated
  for (let r = 0; r < height; r++) {
    for (let c = 0; c < width; c++) {
      const bare = c < 32;
      values[0 * plane + r * width + c] = bare ? 0.5 : 0.1; // red
      values[1 * plane + r * width + c] = 0.3;
      values[2 * plane + r * width + c] = 0.2;
      values[3 * plane + r * width + c] = bare ? 0.3 : 0.7; // nir
    }
  }
  const grid: Grid = {
    width, height, bands: 4, values,
    geo: { originX: 0, originY: height, pixelSizeX: 1, pixelSizeY: 1 },
    crsId: 32618, nodata: null,
  };
  const img = path.join(dir, 'bare.tif');
  writeGeoTiff(grid, img);
  const survey = path.join(dir, 'bare_survey.csv');
  fs.writeFileSync(survey, 'x,y,species\n16,32,Pin oak\n48,32,Pin oak\n');
  const ds = buildDataset(img, survey, { 'Pin oak': 3 }, 0);
  assert.equal(ds.skippedNdvi, 1);
  assert.equal(ds.samples.length, 1);
  assert.ok(tileMeanNdvi(ds.samples[0].data) >= 0);
});

test('stratified split is roughly 70/15/15 and seed-stable', () => {
  const labelMap = readLabelMap(tablePath);
  const a = buildDataset(imagePath, surveyPath, labelMap, 5);
  const b = buildDataset(imagePath, surveyPath, labelMap, 5);
  assert.deepEqual(a.samples.map((s) => s.split),
                   b.samples.map((s) => s.split));
  const n = a.samples.length;
  const trainFrac = ofSplit(a, 'train').length / n;
  assert.ok(trainFrac > 0.6 && trainFrac < 0.8, `train frac ${trainFrac}`);
  assert.ok(ofSplit(a, 'val').length > 0);
  assert.ok(ofSplit(a, 'test').length > 0);
});

test('dataset save/load round trip', () => {
  const labelMap = readLabelMap(tablePath);
  const ds = buildDataset(imagePath, surveyPath, labelMap, 2);
  const out = path.join(dir, 'ds');
  saveDataset(ds, out);
  const back = loadDataset(out);
  assert.equal(back.samples.length, ds.samples.length);
  assert.equal(back.skippedBorder, ds.skippedBorder);
  assert.equal(back.skippedNdvi, ds.skippedNdvi);
  assert.deepEqual(back.classNames, ds.classNames);
  assert.deepEqual(Array.from(back.samples[0].data),
                   Array.from(ds.samples[0].data));
});

test('unknown survey species fails loudly', () => {
  const survey = path.join(dir, 'bad_survey.csv');
  fs.writeFileSync(survey, 'x,y,species\n30,30,Baobab\n');
  assert.throws(() => buildDataset(imagePath, survey, { 'Pin oak': 3 }, 0),
                /Baobab/);
});
