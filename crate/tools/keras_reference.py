"""Dump the layer structure of the Keras backbones used for transfer learning.

Each backbone is built in its own process (fresh layer-name counters) with
random weights, include_top=False and a 128x128x3 input. The output lists,
per layer: class, output shape, inbound layers and weight shapes.

    python tools/keras_reference.py crates/core/tests/fixtures/keras_backbones.json
"""

import json
import multiprocessing as mp
import os
import sys

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

BACKBONES = {
    "vgg19": "VGG19",
    "inceptionv3": "InceptionV3",
    "xception": "Xception",
}


def describe(name, queue):
    import keras

    ctor = getattr(keras.applications, BACKBONES[name])
    model = ctor(weights=None, include_top=False, input_shape=(128, 128, 3))
    layers = []
    for layer in model.layers:
        if isinstance(layer, keras.layers.InputLayer):
            continue
        inbound = []
        for node in layer._inbound_nodes:
            for t in node.input_tensors:
                inbound.append(t._keras_history.operation.name)
        layers.append(
            {
                "name": layer.name,
                "class": type(layer).__name__,
                "output_shape": list(layer.output.shape[1:]),
                "inbound": inbound,
                "weights": [[w.path.split("/")[-1], list(w.shape)] for w in layer.weights],
                "params": layer.count_params(),
            }
        )
    trainable = sum(int(w.numpy().size) for w in model.trainable_weights)
    total = model.count_params()
    queue.put(
        {
            "name": name,
            "layers": layers,
            "output_shape": list(model.output.shape[1:]),
            "trainable_params": trainable,
            "total_params": total,
        }
    )


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "keras_backbones.json"
    result = {}
    ctx = mp.get_context("spawn")
    for name in BACKBONES:
        q = ctx.Queue()
        p = ctx.Process(target=describe, args=(name, q))
        p.start()
        result[name] = q.get()
        p.join()
    with open(out, "w") as f:
        json.dump(result, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()
