#!/usr/bin/env python3
"""Convert torchvision ResNet-family weights into the toolkit's container.

Batch norms are folded into per-channel affine layers (scale/shift), so the
C++ executor only sees convolutions and affine transforms.

    python3 tools/convert_backbone.py --arch resnet18 --pretrained --out assets/
    python3 tools/convert_backbone.py --arch wideresnet50 --random --out work/ --probe 96

With --probe N the script also dumps a random input and the reference tap
activations for a numerical parity check against the C++ executor.
"""

import argparse
import hashlib
import json
import struct
import sys
from pathlib import Path

import numpy as np
import torch
import torchvision


ARCHS = {
    "resnet18": lambda weights: torchvision.models.resnet18(weights=weights),
    "wideresnet50": lambda weights: torchvision.models.wide_resnet50_2(weights=weights),
}


def fold_bn(bn):
    scale = bn.weight.detach().numpy() / np.sqrt(bn.running_var.detach().numpy() + bn.eps)
    shift = bn.bias.detach().numpy() - bn.running_mean.detach().numpy() * scale
    return scale.astype(np.float32), shift.astype(np.float32)


def collect_tensors(model):
    tensors = []

    def emit(prefix, conv, bn):
        tensors.append((prefix + ".weight", conv.weight.detach().numpy().astype(np.float32)))
        scale, shift = fold_bn(bn)
        tensors.append((prefix + ".scale", scale))
        tensors.append((prefix + ".shift", shift))

    emit("stem", model.conv1, model.bn1)
    for li, layer in enumerate([model.layer1, model.layer2, model.layer3, model.layer4], start=1):
        for bi, block in enumerate(layer):
            base = f"layer{li}.{bi}"
            if hasattr(block, "conv3"):  # bottleneck
                emit(base + ".conv1", block.conv1, block.bn1)
                emit(base + ".conv2", block.conv2, block.bn2)
                emit(base + ".conv3", block.conv3, block.bn3)
            else:
                emit(base + ".conv1", block.conv1, block.bn1)
                emit(base + ".conv2", block.conv2, block.bn2)
            if block.downsample is not None:
                emit(base + ".downsample", block.downsample[0], block.downsample[1])
    return tensors


def write_container(base: Path, tensors, sidecar):
    blob = bytearray()
    blob += b"ANLWGT01"
    blob += struct.pack("<I", len(tensors))
    for name, values in tensors:
        encoded = name.encode("utf-8")
        flat = np.ascontiguousarray(values, dtype=np.float32).ravel()
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<B", 0)  # dtype f32
        blob += struct.pack("<Q", flat.size)
        blob += flat.tobytes()
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(str(base) + ".weights", "wb") as f:
        f.write(blob)
    sidecar = dict(sidecar)
    sidecar["format_version"] = 1
    sidecar["content_hash"] = hashlib.sha256(bytes(blob)).hexdigest()
    with open(str(base) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def dump_probe(model, out_dir: Path, size: int, seed: int):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 1.0, size=(3, size, size)).astype(np.float32)
    (out_dir / "probe_input.bin").write_bytes(img.tobytes())

    x = (img - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]
    t = torch.from_numpy(x).unsqueeze(0)
    model.eval()
    taps = {}
    with torch.no_grad():
        h = model.maxpool(model.relu(model.bn1(model.conv1(t))))
        for li, layer in enumerate([model.layer1, model.layer2, model.layer3, model.layer4],
                                   start=1):
            h = layer(h)
            name = f"layer{li}"
            arr = h.squeeze(0).numpy().astype(np.float32)
            (out_dir / f"probe_{name}.bin").write_bytes(arr.tobytes())
            taps[name] = {"channels": arr.shape[0], "height": arr.shape[1],
                          "width": arr.shape[2], "file": f"probe_{name}.bin"}
    meta = {"input": {"channels": 3, "height": size, "width": size, "file": "probe_input.bin"},
            "taps": taps}
    with open(out_dir / "probe_meta.json", "w") as f:
        json.dump(meta, f, indent=2)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--arch", choices=sorted(ARCHS), required=True)
    parser.add_argument("--out", required=True, help="output directory")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--pretrained", action="store_true", help="download ImageNet weights")
    group.add_argument("--random", action="store_true", help="random init (for parity checks)")
    parser.add_argument("--probe", type=int, default=0,
                        help="dump reference activations for an NxN random input")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    torch.manual_seed(args.seed)
    weights = "IMAGENET1K_V1" if args.pretrained else None
    model = ARCHS[args.arch](weights)
    model.eval()

    out_dir = Path(args.out)
    tensors = collect_tensors(model)
    write_container(out_dir / args.arch, tensors,
                    {"backbone_id": args.arch,
                     "source": "torchvision", "pretrained": bool(args.pretrained)})
    print(f"wrote {out_dir / args.arch}.weights ({len(tensors)} tensors)")

    if args.probe:
        dump_probe(model, out_dir, args.probe, args.seed + 1)
        print(f"wrote probe activations for {args.probe}x{args.probe} input")
    return 0


if __name__ == "__main__":
    sys.exit(main())
