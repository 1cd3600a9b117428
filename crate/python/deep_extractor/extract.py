"""Bottleneck feature extraction into FMX files.

Usage:
    extract.py --model resnet50 --mode BN --images manifest.csv --out features.fmx

The manifest is a CSV with `sample_id,path` columns. Output rows follow the
manifest order. The sidecar `<out>.json` records ids, model, layer, mode and
preprocessing.
"""

import argparse
import csv
import hashlib
import json
import os
import struct
import sys

FMX_MAGIC = b"FMX1"

# torchvision constructor and the module whose input is the bottleneck vector
MODELS = {
    "alexnet": ("alexnet", "classifier.6", 227),
    "vgg16": ("vgg16", "classifier.6", 224),
    "vgg19": ("vgg19", "classifier.6", 224),
    "googlenet": ("googlenet", "fc", 224),
    "resnet50": ("resnet50", "fc", 224),
    "densenet201": ("densenet201", "classifier", 224),
    "mobilenetv2": ("mobilenet_v2", "classifier.1", 224),
}
UNAVAILABLE = {"inceptionresnetv2": "not shipped with torchvision"}


class ExtractError(Exception):
    pass


def write_fmx(path, rows, sidecar):
    n = len(rows)
    d = len(rows[0]) if rows else 0
    tmp = path + ".partial"
    with open(tmp, "xb") as f:
        f.write(FMX_MAGIC + struct.pack("<II", n, d))
        for row in rows:
            if len(row) != d:
                raise ExtractError("ragged feature rows")
            f.write(struct.pack("<%df" % d, *row))
    os.replace(tmp, path)
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and not {"sample_id", "path"} <= rows[0].keys():
        raise ExtractError("%s: expected sample_id,path columns" % path)
    return [(r["sample_id"], os.path.join(base, r["path"])) for r in rows]


def load_model(name, weights):
    import torch
    import torchvision

    if name in UNAVAILABLE:
        raise ExtractError("model %s is %s" % (name, UNAVAILABLE[name]))
    if name not in MODELS:
        raise ExtractError("unknown model %s" % name)
    ctor, layer, size = MODELS[name]
    build = getattr(torchvision.models, ctor)
    extra = {"aux_logits": False, "init_weights": False} if ctor == "googlenet" else {}
    if weights == "imagenet":
        model = build(weights="DEFAULT")
        digest = "torchvision:%s:DEFAULT" % ctor
    else:
        torch.manual_seed(0)
        model = build(weights=None, **extra)
        if weights == "random":
            digest = "random:seed0"
        else:
            model.load_state_dict(torch.load(weights, map_location="cpu"))
            with open(weights, "rb") as f:
                digest = "sha256:" + hashlib.sha256(f.read()).hexdigest()
    model.eval()
    modules = dict(model.named_modules())
    if layer not in modules:
        raise ExtractError("layer %s not found in %s" % (layer, name))
    return model, modules[layer], layer, size, digest


def extract(entries, name, weights, batch):
    import torch
    from PIL import Image
    from torchvision import transforms

    model, head, layer, size, digest = load_model(name, weights)
    mean, std = [0.485, 0.456, 0.406], [0.229, 0.224, 0.225]
    prep = transforms.Compose([
        transforms.Resize((size, size), interpolation=transforms.InterpolationMode.BILINEAR),
        transforms.ToTensor(),
        transforms.Normalize(mean, std),
    ])
    captured = []
    hook = head.register_forward_hook(lambda m, inp, out: captured.append(inp[0].detach()))
    rows = []
    with torch.no_grad():
        for start in range(0, len(entries), batch):
            tensors = []
            for sample_id, path in entries[start:start + batch]:
                try:
                    tensors.append(prep(Image.open(path).convert("RGB")))
                except OSError as e:
                    raise ExtractError("cannot decode %s: %s" % (path, e))
            captured.clear()
            model(torch.stack(tensors))
            rows.extend(captured[0].flatten(1).tolist())
    hook.remove()
    meta = {
        "model": name,
        "layer": layer,
        "weights": digest,
        "preprocessing": {"resize": [size, size], "interpolation": "bilinear", "mean": mean, "std": std},
    }
    return rows, meta


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", required=True, choices=sorted(MODELS) + sorted(UNAVAILABLE))
    p.add_argument("--mode", choices=["BN", "FT"], default="BN")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", default="imagenet", help="imagenet, random, or a state_dict path")
    p.add_argument("--labels", help="sample_id,label CSV; required for FT")
    p.add_argument("--batch-size", type=int, default=32)
    args = p.parse_args(argv)
    try:
        if args.mode == "FT":
            if not args.labels:
                raise ExtractError("FT mode needs --labels")
            raise ExtractError("FT mode is not available in this release")
        entries = read_manifest(args.images)
        rows, meta = extract(entries, args.model, args.weights, args.batch_size)
        meta.update({"mode": args.mode})
        sidecar = {
            "sample_ids": [sid for sid, _ in entries],
            "labels": None,
            "source": json.dumps(meta, sort_keys=True),
            "split_point": None,
        }
        write_fmx(args.out, rows, sidecar)
    except ExtractError as e:
        print("extract: %s" % e, file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
