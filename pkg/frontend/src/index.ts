export { Grid, GeoTransform, readGeoTiff, writeGeoTiff, ndviAt } from './geotiff';
export { TILE_SIZE, CHANNELS, TileDataset, TileSample, Split, buildDataset,
         assignSplits, loadDataset, saveDataset, ofSplit, readLabelMap,
         readSurvey, tileMeanNdvi } from './dataset';
export { buildResnet34, initBackend, loadModel, saveModel } from './model';
export { trainCnn, TrainOptions, TrainResult } from './train';
export { predictMap, SpeciesMap, UNCLASSIFIED } from './predict';
export { makeSyntheticTiles, DEFAULT_SIGNATURES } from './synthtiles';
