#!/usr/bin/env python3
"""Build the committed test fixture: glyph dataset, tiny CNN, exported container.

Writes into <out>/model (manifest.json, weights.bin, reference.json,
reference_inputs.bin) and <out>/dataset (PNG composites + annotations.jsonl).

    python3 tools/fixture/make_fixture.py --out fixtures --seed 7
"""

import argparse
import json
import os
import struct
import sys

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

SIZE = 64
HALF = SIZE // 2
CLASS_NAMES = [
    "disk", "frame", "plus", "cross", "triangle",
    "hstripes", "vstripes", "diamond", "ell", "tee",
]


def glyph(cls, rng):
    """Binary glyph mask for class `cls`, side length in [14, 20]."""
    s = int(rng.integers(14, 21))
    t = int(rng.integers(2, 4))
    g = np.zeros((s, s), dtype=np.float32)
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    if cls == 0:
        g[(yy - c) ** 2 + (xx - c) ** 2 <= (s / 2.0) ** 2] = 1
    elif cls == 1:
        g[:, :] = 1
        g[t:s - t, t:s - t] = 0
    elif cls == 2:
        m = s // 2
        g[:, m - t // 2 - 1:m + t // 2 + 1] = 1
        g[m - t // 2 - 1:m + t // 2 + 1, :] = 1
    elif cls == 3:
        g[np.abs(yy - xx) <= t - 1] = 1
        g[np.abs(yy + xx - (s - 1)) <= t - 1] = 1
    elif cls == 4:
        g[(yy >= (s - 1) - 2 * np.abs(xx - c))] = 1
    elif cls == 5:
        for r in range(0, s, 2 * t):
            g[r:r + t, :] = 1
    elif cls == 6:
        for r in range(0, s, 2 * t):
            g[:, r:r + t] = 1
    elif cls == 7:
        d = np.abs(yy - c) + np.abs(xx - c)
        g[(d <= s / 2.0) & (d >= s / 2.0 - t - 0.5)] = 1
    elif cls == 8:
        g[:, 0:t + 1] = 1
        g[s - t - 1:, :] = 1
    elif cls == 9:
        g[0:t + 1, :] = 1
        m = s // 2
        g[:, m - t // 2 - 1:m + t // 2 + 1] = 1
    ys, xs = np.nonzero(g)
    return g[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def background(rng):
    img = rng.uniform(0.0, 0.12, size=(SIZE, SIZE)).astype(np.float32)
    for _ in range(int(rng.integers(3, 8))):
        y, x = rng.integers(0, SIZE - 2, size=2)
        img[y:y + 2, x:x + 2] = rng.uniform(0.2, 0.5)
    return img


def place(img, g, y, x, rng):
    inten = rng.uniform(0.7, 1.0)
    h, w = g.shape
    region = img[y:y + h, x:x + w]
    np.maximum(region, g * inten, out=region)
    return [int(x), int(y), int(x + w - 1), int(y + h - 1)]


def single(rng, cls):
    img = background(rng)
    g = glyph(cls, rng)
    h, w = g.shape
    y = int(rng.integers(0, SIZE - h + 1))
    x = int(rng.integers(0, SIZE - w + 1))
    box = place(img, g, y, x, rng)
    return img, box


def composite(rng, left, right):
    img = background(rng)
    boxes = []
    for cls, x0 in ((left, 0), (right, HALF)):
        g = glyph(cls, rng)
        h, w = g.shape
        y = int(rng.integers(0, SIZE - h + 1))
        x = x0 + int(rng.integers(0, HALF - w + 1))
        boxes.append(place(img, g, y, x, rng))
    return img, boxes


def two_classes(rng):
    a = int(rng.integers(0, 10))
    b = int(rng.integers(0, 9))
    if b >= a:
        b += 1
    return a, b


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, 2),
        )
        self.fc1 = nn.Linear(32 * 8 * 8, 64)
        self.fc2 = nn.Linear(64, 10)

    def forward(self, x):
        x = self.features(x).flatten(1)
        return self.fc2(torch.relu(self.fc1(x)))


def to_tensor(imgs, mean, std):
    x = torch.from_numpy(np.stack(imgs)).unsqueeze(1).repeat(1, 3, 1, 1)
    return (x - mean) / std


def train(rng, n_train):
    imgs, targets = [], []
    for i in range(n_train):
        t = np.zeros(10, dtype=np.float32)
        if i % 2 == 0:
            cls = int(rng.integers(0, 10))
            img, _ = single(rng, cls)
            t[cls] = 1
        else:
            a, b = two_classes(rng)
            img, _ = composite(rng, a, b)
            t[a] = t[b] = 1
        imgs.append(img)
        targets.append(t)
    arr = np.stack(imgs)
    mean = float(arr.mean())
    std = float(arr.std())
    x = to_tensor(imgs, mean, std)
    y = torch.from_numpy(np.stack(targets))

    net = Net()
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    loss_fn = nn.BCEWithLogitsLoss()
    for epoch in range(12):
        perm = torch.randperm(len(x))
        total = 0.0
        for k in range(0, len(x), 64):
            idx = perm[k:k + 64]
            opt.zero_grad()
            loss = loss_fn(net(x[idx]), y[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        print(f"epoch {epoch} loss {total / len(x):.4f}", file=sys.stderr)
    return net.eval(), mean, std


def export(net, mean, std, out_dir, rng):
    os.makedirs(out_dir, exist_ok=True)
    blobs = []
    offset = 0

    def blob(t):
        nonlocal offset
        a = t.detach().numpy().astype("<f4")
        blobs.append(a.tobytes())
        ref = {"offset": offset, "shape": list(a.shape)}
        offset += a.nbytes
        return ref

    layers = []
    names = iter(["conv1", "relu1", "pool1", "conv2", "relu2", "pool2",
                  "conv3", "relu3", "pool3"])
    for m in net.features:
        name = next(names)
        if isinstance(m, nn.Conv2d):
            layers.append({
                "kind": "Conv2d", "name": name,
                "in_channels": m.in_channels, "out_channels": m.out_channels,
                "kernel": list(m.kernel_size), "stride": list(m.stride),
                "padding": list(m.padding),
                "weight": blob(m.weight), "bias": blob(m.bias),
            })
        elif isinstance(m, nn.ReLU):
            layers.append({"kind": "ReLU", "name": name})
        elif isinstance(m, nn.MaxPool2d):
            layers.append({"kind": "MaxPool2d", "name": name,
                           "window": m.kernel_size, "stride": m.stride})
    layers.append({"kind": "Flatten", "name": "flatten"})
    for name, m in (("fc1", net.fc1), ("fc2", net.fc2)):
        layers.append({
            "kind": "Linear", "name": name,
            "in_features": m.in_features, "out_features": m.out_features,
            "weight": blob(m.weight), "bias": blob(m.bias),
        })
        if name == "fc1":
            layers.append({"kind": "ReLU", "name": "relu4"})

    lo = (0.0 - mean) / std
    hi = (1.0 - mean) / std
    manifest = {
        "format_version": 1,
        "input_shape": [3, SIZE, SIZE],
        "class_names": CLASS_NAMES,
        "preprocessing": {"mean": [mean] * 3, "std": [std] * 3},
        "input_bounds": {"low": [lo] * 3, "high": [hi] * 3},
        "weights_file": "weights.bin",
        "layers": layers,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    with open(os.path.join(out_dir, "weights.bin"), "wb") as f:
        for b in blobs:
            f.write(b)

    inputs = torch.from_numpy(
        rng.standard_normal(size=(10, 3, SIZE, SIZE)).astype(np.float32))
    with torch.no_grad():
        logits = net(inputs)
    with open(os.path.join(out_dir, "reference_inputs.bin"), "wb") as f:
        f.write(inputs.numpy().astype("<f4").tobytes())
    n_params = sum(p.numel() for p in net.parameters())
    return {
        "parameter_count": int(n_params),
        "inputs_file": "reference_inputs.bin",
        "input_shape": [3, SIZE, SIZE],
        "logits": logits.numpy().tolist(),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--train", type=int, default=12000)
    ap.add_argument("--test", type=int, default=200)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    torch.manual_seed(args.seed)
    torch.set_num_threads(1)

    net, mean, std = train(rng, args.train)

    hits = 0
    held = 1000
    with torch.no_grad():
        for _ in range(held):
            cls = int(rng.integers(0, 10))
            img, _ = single(rng, cls)
            out = net(to_tensor([img], mean, std))
            hits += int(out.argmax().item() == cls)
    acc = hits / held
    print(f"single-object held-out accuracy {acc:.3f}", file=sys.stderr)
    if acc < 0.90:
        print("accuracy bar not met", file=sys.stderr)
        sys.exit(1)

    model_dir = os.path.join(args.out, "model")
    reference = export(net, mean, std, model_dir, rng)
    reference["single_object_accuracy"] = acc

    data_dir = os.path.join(args.out, "dataset")
    os.makedirs(os.path.join(data_dir, "test"), exist_ok=True)
    records = []
    images = []
    for i in range(args.test):
        a, b = two_classes(rng)
        img, boxes = composite(rng, a, b)
        side = i % 2
        label = (a, b)[side]
        path = f"test/{i:04d}.png"
        u8 = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(np.stack([u8] * 3, axis=-1), "RGB").save(
            os.path.join(data_dir, path))
        records.append({"image": path, "label": label, "boxes": [boxes[side]]})
        with torch.no_grad():
            x = to_tensor([u8.astype(np.float32) / 255.0], mean, std)
            logits = net(x)[0]
        images.append({"image": path, "label": label,
                       "logits": logits.numpy().tolist(),
                       "predicted": int(logits.argmax().item())})
    with open(os.path.join(data_dir, "annotations.jsonl"), "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    reference["images"] = images[:10]
    with open(os.path.join(model_dir, "reference.json"), "w") as f:
        json.dump(reference, f)
        f.write("\n")


if __name__ == "__main__":
    main()
