import assert from 'node:assert/strict';
import { test } from 'node:test';

import { makeSyntheticTiles } from '../src/synthtiles';
import { trainCnn } from '../src/train';

// Acceptance: at least 0.8 test accuracy on seeded synthetic four-species
// tiles, trained on CPU within five minutes.
test('four-species synthetic tiles reach 0.8 test accuracy in budget',
     { timeout: 420_000 }, async () => {
  const dataset = makeSyntheticTiles(100, 42);
  assert.equal(dataset.samples.length, 400);
  const start = Date.now();
  const result = await trainCnn(dataset, { epochs: 4, seed: 3, quiet: true });
  const elapsed = (Date.now() - start) / 1000;
  console.log(`trained to test accuracy ${result.testAccuracy.toFixed(3)} `
    + `in ${elapsed.toFixed(1)}s`);
  assert.ok(result.testAccuracy >= 0.8,
            `test accuracy ${result.testAccuracy} below 0.8`);
  assert.ok(elapsed <= 300, `training took ${elapsed}s, budget 300s`);
});

test('same seed reproduces losses and the accuracy metric',
     { timeout: 300_000 }, async () => {
  const a = await trainCnn(makeSyntheticTiles(10, 7),
                           { epochs: 1, seed: 11, quiet: true });
  const b = await trainCnn(makeSyntheticTiles(10, 7),
                           { epochs: 1, seed: 11, quiet: true });
  assert.deepEqual(a.epochLosses, b.epochLosses);
  assert.equal(a.testAccuracy, b.testAccuracy);
  a.model.dispose();
  b.model.dispose();
});

test('single-class dataset is a training error', async () => {
  const dataset = makeSyntheticTiles(6, 1, 0.06, { 2: [0.1, 0.3, 0.2, 0.7] });
  await assert.rejects(() => trainCnn(dataset, { epochs: 1, quiet: true }),
                       /at least 2 classes/);
});
