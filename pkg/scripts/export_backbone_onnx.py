#!/usr/bin/env python3
"""Export a torchvision backbone's penultimate-layer features to ONNX.

Run this where torch, torchvision, AND the `onnx` package are installed
(torch's exporter needs onnx to serialize). The resulting file plugs into
`ecgfuse encode --backend onnx:<path>:<kind>`:

  mnasnet   -> 1056-wide features (kind mnasnet_class)
  inception -> 2048-wide features (kind inception_class)

The exported graph ends at global average pooling, before the classifier,
so its single output is the feature vector the pipeline consumes.
"""

import argparse


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--arch", choices=["mnasnet", "inception"], required=True)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    try:
        import torch
        import torchvision
    except ImportError as exc:
        print(f"torch/torchvision required: {exc}")
        return 2

    class Features(torch.nn.Module):
        def __init__(self, arch: str):
            super().__init__()
            if arch == "mnasnet":
                self.net = torchvision.models.mnasnet1_0(weights="DEFAULT")
                self.size = 224
            else:
                self.net = torchvision.models.inception_v3(weights="DEFAULT", aux_logits=True)
                self.net.aux_logits = False
                self.size = 299

        def forward(self, x):
            net = self.net
            if hasattr(net, "layers"):  # mnasnet
                x = net.layers(x)
                return x.mean([2, 3])
            # inception_v3: run every child up to (and including) avgpool
            for name, module in net.named_children():
                if name in ("AuxLogits", "dropout", "fc"):
                    continue
                x = module(x)
            return torch.flatten(x, 1)

    model = Features(args.arch).eval()
    dummy = torch.zeros(1, 3, model.size, model.size)
    with torch.no_grad():
        width = model(dummy).shape[1]
    print(f"{args.arch}: feature width {width}")
    torch.onnx.export(
        model, (dummy,), args.out,
        input_names=["input"], output_names=["features"],
        dynamo=False, opset_version=13,
    )
    print(f"exported -> {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
