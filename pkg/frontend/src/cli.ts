#!/usr/bin/env node
/**
 * CLI: dataset build / train / predict.
 *
 *   cli.js dataset build --image imagery.tif --survey survey.csv \
 *       --table species.csv --out dataset/ [--seed 0]
 *   cli.js train --dataset dataset/ --out model/ [--epochs 4] [--seed 0]
 *       [--batch 16] [--lr 0.001]
 *   cli.js predict --model model/ --image imagery.tif --out species.tif
 *
 * `predict` writes the species raster as GeoTIFF plus a label sidecar JSON
 * (<out>.labels.json), the same shape the core pipeline emits and accepts.
 */

import * as fs from 'fs';

import { buildDataset, loadDataset, readLabelMap, saveDataset } from './dataset';
import { readGeoTiff, writeGeoTiff } from './geotiff';
import { loadModel, saveModel } from './model';
import { predictMap } from './predict';
import { trainCnn } from './train';

function parseArgs(argv: string[]): Record<string, string> {
  const args: Record<string, string> = {};
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith('--') || argv[i + 1] === undefined) {
      throw new Error(`malformed arguments near "${argv[i]}"`);
    }
    args[argv[i].slice(2)] = argv[i + 1];
  }
  return args;
}

function need(args: Record<string, string>, key: string): string {
  const v = args[key];
  if (v === undefined) throw new Error(`missing required option --${key}`);
  return v;
}

async function cmdDatasetBuild(args: Record<string, string>): Promise<void> {
  const labelMap = readLabelMap(need(args, 'table'));
  const dataset = buildDataset(need(args, 'image'), need(args, 'survey'),
                               labelMap, parseInt(args.seed ?? '0', 10));
  saveDataset(dataset, need(args, 'out'));
  console.log(`dataset: ${dataset.samples.length} tiles `
    + `(${dataset.skippedBorder} skipped at border, `
    + `${dataset.skippedNdvi} excluded by NDVI)`);
}

async function cmdTrain(args: Record<string, string>): Promise<void> {
  const dataset = loadDataset(need(args, 'dataset'));
  const result = await trainCnn(dataset, {
    epochs: parseInt(args.epochs ?? '4', 10),
    batchSize: parseInt(args.batch ?? '16', 10),
    learningRate: parseFloat(args.lr ?? '0.001'),
    seed: parseInt(args.seed ?? '0', 10),
  });
  await saveModel(result.model, need(args, 'out'), {
    classes: result.classes,
    classNames: dataset.classNames,
    testAccuracy: result.testAccuracy,
    valAccuracy: result.valAccuracy,
  });
  console.log(`test accuracy ${result.testAccuracy.toFixed(3)} `
    + `(val ${result.valAccuracy.toFixed(3)})`);
}

async function cmdPredict(args: Record<string, string>): Promise<void> {
  const { model, meta } = await loadModel(need(args, 'model'));
  const image = readGeoTiff(need(args, 'image'));
  const out = need(args, 'out');
  const map = await predictMap(model, meta.classes, image,
                               parseInt(args.batch ?? '64', 10));
  writeGeoTiff(map.grid, out);
  fs.writeFileSync(`${out}.labels.json`, JSON.stringify(
    { labels: meta.classNames ?? {} }, null, 2) + '\n');
  console.log(`species map ${map.grid.width}x${map.grid.height}: `
    + `${map.classified} tiles classified, `
    + `${map.ndviFiltered} left unclassified by the NDVI filter`);
}

async function main(): Promise<void> {
  const [cmd, sub, ...rest] = process.argv.slice(2);
  try {
    if (cmd === 'dataset' && sub === 'build') {
      await cmdDatasetBuild(parseArgs(rest));
    } else if (cmd === 'train') {
      await cmdTrain(parseArgs(sub ? [sub, ...rest] : rest));
    } else if (cmd === 'predict') {
      await cmdPredict(parseArgs(sub ? [sub, ...rest] : rest));
    } else {
      console.error(
        'usage: cli.js dataset build|train|predict [options]; see README');
      process.exitCode = 2;
      return;
    }
  } catch (err) {
    console.error(`error [${cmd}${sub ? ' ' + sub : ''}]: `
      + `${err instanceof Error ? err.message : err}`);
    process.exitCode = 1;
  }
}

main();
