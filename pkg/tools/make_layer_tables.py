"""Regenerate src/apprentice/layer_tables.json from reference architectures.

Needs torchvision (AlexNet, ResNet-50, ResNet-101) and TensorFlow/Keras
(Inception-ResNet-v2); neither is a runtime dependency of the package.
Every conv/fully-connected layer contributes one row of per-sample
element counts: input feature map, output feature map, weights + bias.
"""

import json
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "apprentice" / "layer_tables.json"


def torch_table(model):
    import torch

    rows = []

    def hook(mod, inp, out):
        n_w = mod.weight.numel() + (mod.bias.numel() if mod.bias is not None else 0)
        rows.append({"name": names[mod], "ifm": inp[0][0].numel(), "ofm": out[0].numel(), "weights": n_w})

    names = {}
    handles = []
    for name, mod in model.named_modules():
        if isinstance(mod, (torch.nn.Conv2d, torch.nn.Linear)):
            names[mod] = name
            handles.append(mod.register_forward_hook(hook))
    model.eval()
    with torch.no_grad():
        model(torch.zeros(1, 3, 224, 224))
    for h in handles:
        h.remove()
    return rows


def keras_table(model):
    import numpy as np
    from tensorflow import keras

    rows = []
    for layer in model.layers:
        if isinstance(layer, (keras.layers.Conv2D, keras.layers.Dense)):
            ifm = int(np.prod(layer.input.shape[1:]))
            ofm = int(np.prod(layer.output.shape[1:]))
            n_w = int(sum(np.prod(w.shape) for w in layer.weights))
            rows.append({"name": layer.name, "ifm": ifm, "ofm": ofm, "weights": n_w})
    return rows


def main():
    import torchvision.models as tvm
    from tensorflow import keras

    tables = {
        "alexnet": torch_table(tvm.alexnet()),
        "inception_resnet_v2": keras_table(
            keras.applications.InceptionResNetV2(weights=None, input_shape=(224, 224, 3))),
        "resnet50": torch_table(tvm.resnet50()),
        "resnet101": torch_table(tvm.resnet101()),
    }
    OUT.write_text(json.dumps(tables, indent=1) + "\n")
    for k, v in tables.items():
        print(k, len(v), "layers", sum(r["weights"] for r in v), "weights", file=sys.stderr)


if __name__ == "__main__":
    main()
