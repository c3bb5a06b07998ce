#!/usr/bin/env python3
"""Convert torchvision ResNet weights into the dstpm tensor archive format.

Usage:
  convert_torchvision_weights.py --variant resnet18 [--input resnet18.pth] [--out DIR]

Without --input the ImageNet weights are fetched through torchvision. The
result is written to DIR/<variant>.dstw (default: $DSTPM_WEIGHTS_DIR or
~/.cache/dstpm), where a weights source of "auto" finds it.
"""

import argparse
import json
import os
import struct
import sys
from pathlib import Path

import torch

MAGIC = b"DSTPMARC"
VERSION = 1
DTYPES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64", torch.uint8: "uint8"}


def default_out_dir() -> Path:
    env = os.environ.get("DSTPM_WEIGHTS_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "dstpm"


def load_state_dict(variant: str, path: str | None) -> dict:
    if path:
        state = torch.load(path, map_location="cpu")
        return state.get("state_dict", state)
    import torchvision

    builder = getattr(torchvision.models, variant)
    return builder(weights="IMAGENET1K_V1").state_dict()


def write_archive(path: Path, tensors: dict, metadata: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in DTYPES:
            raise SystemExit(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"metadata": metadata, "tensors": entries}).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--variant", required=True, choices=["resnet18", "resnet50"])
    parser.add_argument("--input", help="torchvision state_dict (.pth); fetched when omitted")
    parser.add_argument("--out", type=Path, default=default_out_dir(), help="output directory")
    args = parser.parse_args()

    state = load_state_dict(args.variant, args.input)
    tensors = {k: v for k, v in state.items() if not k.startswith("fc.")}
    out = args.out / f"{args.variant}.dstw"
    write_archive(out, tensors, {"variant": args.variant, "source": args.input or "torchvision IMAGENET1K_V1"})
    print(f"wrote {len(tensors)} tensors to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
