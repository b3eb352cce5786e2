/**
 * 34-layer residual network with the first convolution widened to accept
 * four input channels, plus the runtime plumbing it needs here: the WASM
 * backend (fast CPU inference/training without native binaries) and a
 * Conv2DBackpropFilter kernel for that backend, which upstream does not
 * ship. The kernel is expressed with existing ops: transposing batch and
 * channel axes turns the filter gradient into a stride-1 dilated
 * convolution of the input with the output gradient.
 */

import * as tf from '@tensorflow/tfjs';
import * as wasm from '@tensorflow/tfjs-backend-wasm';
import * as fs from 'fs';
import * as path from 'path';

import { CHANNELS, TILE_SIZE } from './dataset';

let backendReady: Promise<void> | null = null;

/** Single-threaded WASM keeps results bit-reproducible run to run. */
export function initBackend(): Promise<void> {
  if (!backendReady) {
    wasm.setThreadsCount(1);
    backendReady = (async () => {
      await tf.setBackend('wasm');
      await tf.ready();
      registerConv2DBackpropFilter();
    })();
  }
  return backendReady;
}

function registerConv2DBackpropFilter(): void {
  if (tf.getKernelsForBackend('wasm')
        .some((k) => k.kernelName === 'Conv2DBackpropFilter')) {
    return;
  }
  tf.registerKernel({
    kernelName: 'Conv2DBackpropFilter',
    backendName: 'wasm',
    kernelFunc: ({ inputs, attrs }: any) => {
      const { x, dy } = inputs;
      const { strides, pad, filterShape } = attrs;
      const [sh, sw] = Array.isArray(strides) ? strides : [strides, strides];
      const [kh, kw] = [filterShape[0], filterShape[1]];
      const [, H, W] = x.shape;
      const [, Ho, Wo] = dy.shape;
      let padT = 0; let padB = 0; let padL = 0; let padR = 0;
      if (pad === 'same') {
        const alongH = Math.max((Ho - 1) * sh + kh - H, 0);
        const alongW = Math.max((Wo - 1) * sw + kw - W, 0);
        padT = Math.floor(alongH / 2); padB = alongH - padT;
        padL = Math.floor(alongW / 2); padR = alongW - padL;
      } else if (Array.isArray(pad)) {
        padT = pad[1][0]; padB = pad[1][1];
        padL = pad[2][0]; padR = pad[2][1];
      }
      return tf.tidy(() => {
        const xT = tf.transpose(x, [3, 1, 2, 0]);    // [Ci, H, W, N]
        const dyT = tf.transpose(dy, [1, 2, 0, 3]);  // [Ho, Wo, N, Co]
        let out = tf.conv2d(
          xT as tf.Tensor4D, dyT as tf.Tensor4D, 1,
          [[0, 0], [padT, padB], [padL, padR], [0, 0]] as any,
          'NHWC', [sh, sw]);
        if (out.shape[1] !== kh || out.shape[2] !== kw) {
          // stride-skipped tail positions fall outside the filter extent
          out = tf.slice(out, [0, 0, 0, 0],
                         [out.shape[0], kh, kw, out.shape[3]]);
        }
        return tf.transpose(out, [1, 2, 0, 3]);      // [kh, kw, Ci, Co]
      });
    },
  });
}

const BLOCKS: Array<[number, number, number]> = [
  [64, 3, 1], [128, 4, 2], [256, 6, 2], [512, 3, 2],
];

export function buildResnet34(numClasses: number, seed = 0): tf.LayersModel {
  let seedCounter = seed * 1000;
  const nextSeed = () => ++seedCounter;
  // moving statistics must converge within a toy-scale step budget
  const batchNorm = () => tf.layers.batchNormalization({ momentum: 0.9 });
  const conv = (filters: number, kernel: number, stride: number) =>
    tf.layers.conv2d({
      filters, kernelSize: kernel, strides: stride, padding: 'same',
      useBias: false,
      kernelInitializer: tf.initializers.heNormal({ seed: nextSeed() }),
    });

  const input = tf.input({ shape: [TILE_SIZE, TILE_SIZE, CHANNELS] });
  let x = conv(64, 7, 2).apply(input) as tf.SymbolicTensor;
  x = batchNorm().apply(x) as tf.SymbolicTensor;
  x = tf.layers.reLU().apply(x) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 3, strides: 2, padding: 'same' })
    .apply(x) as tf.SymbolicTensor;

  for (const [filters, blocks, firstStride] of BLOCKS) {
    for (let b = 0; b < blocks; b++) {
      const stride = b === 0 ? firstStride : 1;
      let shortcut = x;
      let y = conv(filters, 3, stride).apply(x) as tf.SymbolicTensor;
      y = batchNorm().apply(y) as tf.SymbolicTensor;
      y = tf.layers.reLU().apply(y) as tf.SymbolicTensor;
      y = conv(filters, 3, 1).apply(y) as tf.SymbolicTensor;
      y = batchNorm().apply(y) as tf.SymbolicTensor;
      const inChannels = x.shape[x.shape.length - 1];
      if (stride !== 1 || inChannels !== filters) {
        shortcut = conv(filters, 1, stride).apply(shortcut) as tf.SymbolicTensor;
        shortcut = batchNorm()
          .apply(shortcut) as tf.SymbolicTensor;
      }
      x = tf.layers.add().apply([y, shortcut]) as tf.SymbolicTensor;
      x = tf.layers.reLU().apply(x) as tf.SymbolicTensor;
    }
  }

  x = tf.layers.globalAveragePooling2d({}).apply(x) as tf.SymbolicTensor;
  const output = tf.layers.dense({
    units: numClasses, activation: 'softmax',
    kernelInitializer: tf.initializers.glorotUniform({ seed: nextSeed() }),
  }).apply(x) as tf.SymbolicTensor;
  return tf.model({ inputs: input, outputs: output });
}

// Plain-file model persistence; the convenience file:// handler is not
// available without the native binding, so use the in-memory IO hooks.
export async function saveModel(model: tf.LayersModel, dir: string,
                                extra: Record<string, unknown>): Promise<void> {
  fs.mkdirSync(dir, { recursive: true });
  await model.save(tf.io.withSaveHandler(async (artifacts) => {
    const weights = Buffer.from(artifacts.weightData as ArrayBuffer);
    fs.writeFileSync(path.join(dir, 'weights.bin'), weights);
    fs.writeFileSync(path.join(dir, 'model.json'), JSON.stringify({
      modelTopology: artifacts.modelTopology,
      weightSpecs: artifacts.weightSpecs,
      ...extra,
    }, null, 2) + '\n');
    return { modelArtifactsInfo: { dateSaved: new Date(0),
                                   modelTopologyType: 'JSON' } };
  }));
}

export async function loadModel(dir: string):
    Promise<{ model: tf.LayersModel; meta: any }> {
  await initBackend();
  const meta = JSON.parse(
    fs.readFileSync(path.join(dir, 'model.json'), 'utf-8'));
  const weights = fs.readFileSync(path.join(dir, 'weights.bin'));
  const model = await tf.loadLayersModel(tf.io.fromMemory({
    modelTopology: meta.modelTopology,
    weightSpecs: meta.weightSpecs,
    weightData: weights.buffer.slice(
      weights.byteOffset, weights.byteOffset + weights.byteLength),
  }));
  return { model, meta };
}
