/**
 * Toy-scale training loop: seeded shuffles, Adam, a handful of epochs.
 *
 * The architecture is the full 34-layer residual network; only the data and
 * schedule are toy-scale. Labels are remapped to a dense 0..k-1 range for
 * the softmax head and mapped back at prediction time.
 */

import * as tf from '@tensorflow/tfjs';

import { CHANNELS, TILE_SIZE, TileDataset, TileSample, ofSplit } from './dataset';
import { buildResnet34, initBackend } from './model';
import { mulberry32, shuffled } from './rng';

export interface TrainOptions {
  epochs?: number;
  batchSize?: number;
  learningRate?: number;
  seed?: number;
  quiet?: boolean;
}

export interface TrainResult {
  model: tf.LayersModel;
  classes: number[];
  testAccuracy: number;
  valAccuracy: number;
  epochLosses: number[];
}

function toTensors(samples: TileSample[], classIndex: Map<number, number>):
    { xs: tf.Tensor4D; ys: tf.Tensor1D } {
  const n = samples.length;
  const plane = TILE_SIZE * TILE_SIZE;
  const data = new Float32Array(n * plane * CHANNELS);
  const labels = new Float32Array(n);
  samples.forEach((s, i) => {
    // channel-major storage -> NHWC feed
    const base = i * plane * CHANNELS;
    for (let p = 0; p < plane; p++) {
      for (let c = 0; c < CHANNELS; c++) {
        data[base + p * CHANNELS + c] = s.data[c * plane + p];
      }
    }
    labels[i] = classIndex.get(s.label)!;
  });
  return {
    xs: tf.tensor4d(data, [n, TILE_SIZE, TILE_SIZE, CHANNELS]),
    ys: tf.tensor1d(labels, 'float32'),
  };
}

async function accuracy(model: tf.LayersModel, samples: TileSample[],
                        classIndex: Map<number, number>,
                        batchSize: number): Promise<number> {
  if (samples.length === 0) return 0;
  let correct = 0;
  for (let i = 0; i < samples.length; i += batchSize) {
    const batch = samples.slice(i, i + batchSize);
    const { xs, ys } = toTensors(batch, classIndex);
    const pred = model.predict(xs) as tf.Tensor2D;
    const predIdx = await pred.argMax(-1).data();
    const want = await ys.data();
    for (let k = 0; k < batch.length; k++) {
      if (predIdx[k] === want[k]) correct++;
    }
    xs.dispose(); ys.dispose(); pred.dispose();
  }
  return correct / samples.length;
}

export async function trainCnn(dataset: TileDataset,
                               options: TrainOptions = {}): Promise<TrainResult> {
  const { epochs = 4, batchSize = 16, learningRate = 1e-3, seed = 0,
          quiet = false } = options;
  await initBackend();

  const classes = [...new Set(dataset.samples.map((s) => s.label))]
    .sort((a, b) => a - b);
  if (classes.length < 2) {
    throw new Error(`training needs at least 2 classes, got ${classes.length}`);
  }
  const classIndex = new Map(classes.map((c, i) => [c, i]));

  const train = ofSplit(dataset, 'train');
  const val = ofSplit(dataset, 'val');
  const test = ofSplit(dataset, 'test');
  if (train.length === 0) throw new Error('training split is empty');

  const model = buildResnet34(classes.length, seed);
  model.compile({
    optimizer: tf.train.adam(learningRate),
    loss: 'sparseCategoricalCrossentropy',
  });

  const rand = mulberry32(seed + 1);
  const epochLosses: number[] = [];
  for (let epoch = 0; epoch < epochs; epoch++) {
    const order = shuffled(train, rand);
    let lossSum = 0;
    let batches = 0;
    for (let i = 0; i < order.length; i += batchSize) {
      const batch = order.slice(i, i + batchSize);
      const { xs, ys } = toTensors(batch, classIndex);
      const loss = await model.trainOnBatch(xs, ys) as number;
      lossSum += loss;
      batches++;
      xs.dispose(); ys.dispose();
    }
    epochLosses.push(lossSum / batches);
    if (!quiet) {
      const valAcc = await accuracy(model, val, classIndex, batchSize);
      console.log(`epoch ${epoch + 1}/${epochs} loss ${(lossSum / batches)
        .toFixed(4)} val acc ${valAcc.toFixed(3)}`);
    }
  }

  const valAccuracy = await accuracy(model, val, classIndex, batchSize);
  const testAccuracy = await accuracy(model, test, classIndex, batchSize);
  return { model, classes, testAccuracy, valAccuracy, epochLosses };
}
