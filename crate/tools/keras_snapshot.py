"""Converts a Keras application backbone (no classifier, 128x128 input) into
the layers-model snapshot layout read by `load_pretrained`:

    <weights-dir>/<backbone>/model.json
    <weights-dir>/<backbone>/group1-shard*.bin

Usage:
    python tools/keras_snapshot.py <weights-dir> [vgg19|inceptionv3|xception ...]
        [--weights imagenet|none|<file.h5>]

`--probe <input.f32>` also runs the backbone on that raw NHWC float32 batch
and writes the feature maps to `<backbone>/probe_output.f32`.

`--weights imagenet` downloads the ImageNet weights through Keras (network
access required once; Keras caches them under ~/.keras/models).
"""

import argparse
import json
import os

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np  # noqa: E402

BACKBONES = {
    "vgg19": "VGG19",
    "inceptionv3": "InceptionV3",
    "xception": "Xception",
}
SHARD_BYTES = 4 * 1024 * 1024


def build(name, weights):
    import keras

    # auto-generated layer names (conv2d_3, add_7...) count per session
    keras.backend.clear_session()
    ctor = getattr(keras.applications, BACKBONES[name])
    w = None if weights == "none" else weights
    return ctor(include_top=False, weights=w, input_shape=(128, 128, 3))


def convert(model, out_dir, source):
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    blob = bytearray()
    for layer in model.layers:
        for var in layer.weights:
            value = np.asarray(var.numpy(), dtype="<f4")
            param = var.path.rsplit("/", 1)[-1]
            entries.append({
                "name": f"{layer.name}/{param}",
                "shape": list(value.shape),
                "dtype": "float32",
            })
            blob += value.tobytes(order="C")
    chunks = [blob[i:i + SHARD_BYTES] for i in range(0, len(blob), SHARD_BYTES)]
    paths = []
    for k, chunk in enumerate(chunks):
        name = f"group1-shard{k + 1}of{len(chunks)}.bin"
        with open(os.path.join(out_dir, name), "wb") as f:
            f.write(chunk)
        paths.append(name)
    doc = {
        "format": "layers-model",
        "generatedBy": f"keras_snapshot.py ({source})",
        "modelTopology": json.loads(model.to_json()),
        "weightsManifest": [{"paths": paths, "weights": entries}],
    }
    with open(os.path.join(out_dir, "model.json"), "w") as f:
        json.dump(doc, f)
    return len(entries), len(blob) // 4


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("weights_dir")
    ap.add_argument("backbones", nargs="*", default=list(BACKBONES))
    ap.add_argument("--weights", default="imagenet")
    ap.add_argument("--probe")
    args = ap.parse_args()
    for name in args.backbones:
        if name not in BACKBONES:
            ap.error(f"unknown backbone {name}; expected one of {', '.join(BACKBONES)}")
        model = build(name, args.weights)
        out_dir = os.path.join(args.weights_dir, name)
        tensors, values = convert(model, out_dir, args.weights)
        if args.probe:
            x = np.fromfile(args.probe, dtype="<f4").reshape(-1, 128, 128, 3)
            y = np.asarray(model.predict(x, verbose=0), dtype="<f4")
            y.tofile(os.path.join(out_dir, "probe_output.f32"))
        print(f"{name}: {tensors} tensors, {values} values")


if __name__ == "__main__":
    main()
