// Loads an exported bundle with TensorFlow.js and prints class
// probabilities for a raw float32 NHWC input file.
//
//   NODE_PATH=$(npm root -g) node tools/tfjs_predict.js <bundle-dir> <input.f32> <batch>
const fs = require('fs');
const path = require('path');
const tf = require('@tensorflow/tfjs');

async function main() {
  const [dir, inputPath, batchArg] = process.argv.slice(2);
  if (!dir || !inputPath || !batchArg) {
    console.error('usage: tfjs_predict.js <bundle-dir> <input.f32> <batch>');
    process.exit(2);
  }
  const modelJson = JSON.parse(fs.readFileSync(path.join(dir, 'model.json'), 'utf8'));
  const specs = [];
  const buffers = [];
  for (const group of modelJson.weightsManifest) {
    specs.push(...group.weights);
    for (const p of group.paths) buffers.push(fs.readFileSync(path.join(dir, p)));
  }
  const all = Buffer.concat(buffers);
  const weightData = all.buffer.slice(all.byteOffset, all.byteOffset + all.byteLength);
  await tf.setBackend('cpu');
  const model = await tf.loadLayersModel(
    tf.io.fromMemory({ modelTopology: modelJson.modelTopology, weightSpecs: specs, weightData }),
  );
  const raw = fs.readFileSync(inputPath);
  const values = new Float32Array(raw.buffer.slice(raw.byteOffset, raw.byteOffset + raw.byteLength));
  const batch = Number(batchArg);
  const shape = [batch, ...model.inputs[0].shape.slice(1)];
  const probs = model.predict(tf.tensor(values, shape));
  process.stdout.write(JSON.stringify(await probs.array()));
}

main().catch((e) => {
  console.error(String(e && e.stack ? e.stack : e));
  process.exit(1);
});
