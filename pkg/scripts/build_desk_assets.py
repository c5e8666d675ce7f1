"""Regenerate the desk-scale assets under src/sparsekit/assets/.

Builds a 1000-image colored digit set from scikit-learn's 8x8 digits
(upsampled to 16x16, random foreground/background colors) and trains the
reference CNN on it with PyTorch. Only needed to refresh the shipped files;
the toolkit itself never imports torch.

    python scripts/build_desk_assets.py [--epochs 40]
"""

import argparse
import json
import shutil
from pathlib import Path

import numpy as np
import torch
from sklearn.datasets import load_digits
from torch import nn

from sparsekit.data import _resize_channel
from sparsekit.model import Model, forward, fuse_batchnorm, save_bundle
from sparsekit.syndata import read_image, write_image
from sparsekit.tensor import BatchNormParams, LayerSpec

ASSETS = Path(__file__).resolve().parents[1] / "src" / "sparsekit" / "assets"
N_SHIPPED = 1000
N_TRAIN_SPLIT = 500
WIDTH = (6, 12, 12, 24)


def colored_digits(seed=0):
    digits = load_digits()
    rng = np.random.default_rng(seed)
    images = []
    for d8 in digits.images / 16.0:
        d = _resize_channel(d8.astype(np.float32), 16, 16).clip(0, 1)
        bg = rng.uniform(0, 1, 3)
        fg = rng.uniform(0, 1, 3)
        while abs(fg.mean() - bg.mean()) < 0.35:
            fg = rng.uniform(0, 1, 3)
        rgb = bg[:, None, None] * (1 - d) + fg[:, None, None] * d
        rgb += rng.normal(0, 0.08, rgb.shape)
        images.append(np.rint(rgb.clip(0, 1) * 255).astype(np.uint8))
    order = rng.permutation(len(images))
    return np.stack(images)[order], digits.target[order]


class DeskCNN(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, WIDTH[0], 3, 1, 1, bias=False), nn.BatchNorm2d(WIDTH[0]), nn.ReLU(),
            nn.Conv2d(WIDTH[0], WIDTH[1], 3, 2, 1, bias=False), nn.BatchNorm2d(WIDTH[1]), nn.ReLU(),
            nn.Conv2d(WIDTH[1], WIDTH[2], 3, 2, 1, bias=False), nn.BatchNorm2d(WIDTH[2]), nn.ReLU(),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(WIDTH[2] * 16, WIDTH[3]), nn.ReLU(),
                                  nn.Linear(WIDTH[3], 10))

    def forward(self, x):
        return self.head(self.features(x))


def shift_augment(x, gen):
    dx, dy = torch.randint(-1, 2, (2,), generator=gen).tolist()
    return torch.roll(x, shifts=(dy, dx), dims=(2, 3))


def train(x, y, epochs, seed=0):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = DeskCNN()
    opt = torch.optim.Adam(net.parameters(), lr=2e-3, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    for _ in range(epochs):
        net.train()
        perm = torch.randperm(len(xt), generator=gen)
        for i in range(0, len(xt), 64):
            idx = perm[i:i + 64]
            loss = nn.functional.cross_entropy(net(shift_augment(xt[idx], gen)), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    return net.eval()


def export(net):
    layers = []
    conv_i = bn_i = 0
    for m in list(net.features) + list(net.head):
        if isinstance(m, nn.Conv2d):
            conv_i += 1
            layers.append(LayerSpec("conv2d", f"conv{conv_i}", m.weight.detach().numpy(), None,
                                    m.stride[0], m.padding[0]))
        elif isinstance(m, nn.BatchNorm2d):
            bn_i += 1
            layers.append(LayerSpec("batchnorm", f"bn{bn_i}", bn=BatchNormParams(
                m.weight.detach().numpy(), m.bias.detach().numpy(),
                m.running_mean.numpy(), m.running_var.numpy(), m.eps)))
        elif isinstance(m, nn.ReLU):
            layers.append(LayerSpec("relu", f"relu{len([l for l in layers if l.kind == 'relu']) + 1}"))
        elif isinstance(m, nn.Linear):
            n = len([l for l in layers if l.kind == "fully_connected"]) + 1
            layers.append(LayerSpec("fully_connected", f"fc{n}", m.weight.detach().numpy(),
                                    m.bias.detach().numpy()))
    return Model(layers, (3, 16, 16), 10, {"description": "desk-scale colored-digit CNN"})


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=40)
    args = ap.parse_args()

    images, labels = colored_digits()
    data_dir = ASSETS / "desk_digits"
    shutil.rmtree(data_dir, ignore_errors=True)
    (data_dir / "images").mkdir(parents=True)
    samples = []
    for i in range(N_SHIPPED):
        fname = f"images/{i:04d}.ppm"
        write_image(data_dir / fname, images[i])
        samples.append({"file": fname, "label": int(labels[i]),
                        "split": "train" if i < N_TRAIN_SPLIT else "val"})

    raw = np.stack([read_image(data_dir / s["file"]) for s in samples])
    extra = images[N_SHIPPED:].astype(np.float32) / 255.0
    train_raw = np.concatenate([raw[:N_TRAIN_SPLIT], extra])
    train_y = np.concatenate([labels[:N_TRAIN_SPLIT], labels[N_SHIPPED:]])
    mean = train_raw.mean(axis=(0, 2, 3))
    std = train_raw.std(axis=(0, 2, 3))
    preprocess = {"resize": 16, "crop": 16, "mean": [round(float(v), 4) for v in mean],
                  "std": [round(float(v), 4) for v in std]}
    manifest = {"description": "colored 16x16 digits (scikit-learn digits, recolored)",
                "num_classes": 10, "preprocess": preprocess, "samples": samples}
    (data_dir / "dataset.json").write_text(json.dumps(manifest, indent=1) + "\n")

    m = np.asarray(preprocess["mean"], np.float32).reshape(1, 3, 1, 1)
    s = np.asarray(preprocess["std"], np.float32).reshape(1, 3, 1, 1)
    net = train(((train_raw - m) / s).astype(np.float32), train_y.astype(np.int64), args.epochs)

    val_x = ((raw[N_TRAIN_SPLIT:] - m) / s).astype(np.float32)
    val_y = labels[N_TRAIN_SPLIT:N_SHIPPED]
    with torch.no_grad():
        ref = net(torch.from_numpy(val_x)).numpy()
    bn_model = export(net)
    fused = fuse_batchnorm(bn_model)
    for model in (bn_model, fused):
        assert np.abs(forward(model, val_x) - ref).max() < 1e-3
    print("val top-1:", float((ref.argmax(1) == val_y).mean()))
    print("prunable weights:", sum(l.weights.size for l in fused.prunable_layers()))
    for name, model in (("desk_cnn_bn", bn_model), ("desk_cnn", fused)):
        shutil.rmtree(ASSETS / name, ignore_errors=True)
        save_bundle(model, ASSETS / name)


if __name__ == "__main__":
    main()
