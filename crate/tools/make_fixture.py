#!/usr/bin/env python3
"""Build the committed toy fixture under crates/core/fixtures/toy4.

Trains a four-block residual CNN on a synthetic 4-class pattern task
(horizontal / vertical / diagonal stripes, blobs), then writes:

  model.graph       graph document
  weights.gwta      weight archive
  id_test.gwta      in-distribution test split (images + labels)
  ood_noise.gwta    uniform-noise images
  ood_texture.gwta  smooth random colour blotches
  reference.gwta    reference inputs, logits and GAIA scores
  manifest.json     normalisation, taps, layer mapping, reference hash

Usage: python3 tools/make_fixture.py [--seed 0] [--out DIR]
"""

import argparse
import hashlib
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SIZE = 16
CLASSES = 4
MEAN, STD = 0.5, 0.25
BN_EPS = 1e-5


def make_id(n, gen):
    xs = torch.zeros(n, 3, SIZE, SIZE)
    ys = torch.randint(0, CLASSES, (n,), generator=gen)
    ii, jj = torch.meshgrid(
        torch.arange(SIZE).float(), torch.arange(SIZE).float(), indexing="ij"
    )
    for t in range(n):
        c = ys[t].item()
        freq = 0.5 + torch.rand(1, generator=gen).item() * 0.6
        ph = torch.rand(1, generator=gen).item() * 6.28
        if c == 0:
            base = torch.sin(freq * ii + ph)
        elif c == 1:
            base = torch.sin(freq * jj + ph)
        elif c == 2:
            base = torch.sin(freq * (ii + jj) / 1.4 + ph)
        else:
            ci, cj = torch.rand(2, generator=gen) * (SIZE - 6) + 3
            r = 2 + torch.rand(1, generator=gen).item() * 3
            base = torch.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * r * r)) * 2 - 1
        tint = 0.6 + 0.4 * torch.rand(3, generator=gen)
        img = 0.5 + 0.4 * base[None] * tint[:, None, None]
        img = img + 0.05 * torch.randn(3, SIZE, SIZE, generator=gen)
        xs[t] = img.clamp(0, 1)
    return xs, ys


def make_noise(n, gen):
    return torch.rand(n, 3, SIZE, SIZE, generator=gen)


def make_texture(n, gen):
    x = torch.rand(n, 3, 4, 4, generator=gen)
    return F.interpolate(x, size=(SIZE, SIZE), mode="bilinear", align_corners=False)


def normalize(x):
    return (x - MEAN) / STD


class Block(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.b1 = nn.BatchNorm2d(cout, eps=BN_EPS)
        self.c2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.b2 = nn.BatchNorm2d(cout, eps=BN_EPS)
        self.proj = stride != 1 or cin != cout
        if self.proj:
            self.sc = nn.Conv2d(cin, cout, 1, stride, 0)
            self.sb = nn.BatchNorm2d(cout, eps=BN_EPS)

    def forward(self, x, taps=None, name=None):
        h = F.relu(self.b1(self.c1(x)))
        h = self.b2(self.c2(h))
        sc = self.sb(self.sc(x)) if self.proj else x
        a = h + sc
        if taps is not None:
            taps[name] = a
        return F.relu(a)


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.stem = nn.Conv2d(3, 8, 3, 1, 1)
        self.sbn = nn.BatchNorm2d(8, eps=BN_EPS)
        self.l1 = Block(8, 8, 1)
        self.l2 = Block(8, 16, 2)
        self.l3 = Block(16, 32, 2)
        self.l4 = Block(32, 32, 2)
        self.fc = nn.Linear(32, CLASSES)

    def features(self, x, taps=None):
        x = F.relu(self.sbn(self.stem(x)))
        x = self.l1(x, taps, "block1")
        x = self.l2(x, taps, "block2")
        x = self.l3(x, taps, "block3")
        return self.l4(x, taps, "block4")

    def forward(self, x, taps=None):
        return self.fc(self.features(x, taps).mean((2, 3)))


def graph_document():
    lines = [
        "# toy4: four-block residual CNN on 3x16x16 synthetic patterns",
        "input 3 16 16",
        "classes 4",
        "stem: conv2d out=8 kernel=3 stride=1 pad=1 weight=stem.weight bias=stem.bias",
        "stem_bn: batchnorm gamma=sbn.weight beta=sbn.bias mean=sbn.running_mean var=sbn.running_var eps=1e-5",
        "stem_relu: relu",
    ]
    mapping = {"stem": "stem", "sbn": "stem_bn"}
    prev = "stem_relu"
    for i, (cout, stride, proj) in enumerate(
        [(8, 1, False), (16, 2, True), (32, 2, True), (32, 2, True)], start=1
    ):
        m, b = f"l{i}", f"b{i}"

        def bn(layer, mod, src=None):
            src_key = f" in={src}" if src else ""
            return (
                f"{layer}: batchnorm{src_key} gamma={mod}.weight beta={mod}.bias "
                f"mean={mod}.running_mean var={mod}.running_var eps=1e-5"
            )

        lines += [
            f"{b}_conv1: conv2d in={prev} out={cout} kernel=3 stride={stride} pad=1 weight={m}.c1.weight bias={m}.c1.bias",
            bn(f"{b}_bn1", f"{m}.b1"),
            f"{b}_relu1: relu",
            f"{b}_conv2: conv2d out={cout} kernel=3 stride=1 pad=1 weight={m}.c2.weight bias={m}.c2.bias",
            bn(f"{b}_bn2", f"{m}.b2"),
        ]
        mapping.update({f"{m}.c1": f"{b}_conv1", f"{m}.b1": f"{b}_bn1",
                        f"{m}.c2": f"{b}_conv2", f"{m}.b2": f"{b}_bn2"})
        skip = prev
        if proj:
            lines += [
                f"{b}_proj: conv2d in={prev} out={cout} kernel=1 stride={stride} pad=0 weight={m}.sc.weight bias={m}.sc.bias",
                bn(f"{b}_proj_bn", f"{m}.sb"),
            ]
            mapping.update({f"{m}.sc": f"{b}_proj", f"{m}.sb": f"{b}_proj_bn"})
            skip = f"{b}_proj_bn"
        lines += [f"{b}_add: add in={b}_bn2,{skip}", f"{b}_out: relu"]
        prev = f"{b}_out"
    lines += ["gap: global_avg_pool", "fc: linear out=4 weight=fc.weight bias=fc.bias"]
    mapping["fc"] = "fc"
    for i in range(1, 5):
        lines.append(f"tap block{i} b{i}_add block{i}")
    lines.append("split b4_out")
    return "\n".join(lines) + "\n", mapping


def write_archive(path, tensors):
    out = bytearray(b"GWTA")
    out += struct.pack("<II", 1, len(tensors))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        if arr.dtype == np.float32:
            dtype = 0
        elif arr.dtype == np.int32:
            dtype = 1
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", dtype, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))
    return bytes(out)


def gaia_scores(net, x, method, blocks):
    scores = []
    for i in range(x.shape[0]):
        taps = {}
        xi = x[i : i + 1]
        a_last = net.features(xi, taps)
        tapped = [taps[b] for b in blocks]
        if method == "z":
            logits = net.fc(a_last.mean((2, 3)))
            c = logits.argmax()
            grads = torch.autograd.grad(logits[0, c], tapped)
            rows = [(g[0] != 0).double().mean((1, 2)) for g in grads]
        else:
            leaf = a_last.detach().requires_grad_(True)
            fused = F.log_softmax(net.fc(leaf.mean((2, 3))), 1).sum()
            e_out = torch.autograd.grad(fused, leaf)[0].abs().double().mean()
            grads = torch.autograd.grad(a_last.sum(), tapped)
            rows = [
                g[0].abs().double().mean((1, 2)) / torch.sqrt(e_out.clamp_min(1e-12))
                for g in grads
            ]
        scores.append(torch.cat(rows).pow(2).sum().sqrt().item())
    return np.array(scores, dtype=np.float32)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument(
        "--out",
        default=os.path.join(os.path.dirname(__file__), "..", "crates", "core", "fixtures", "toy4"),
    )
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    torch.manual_seed(args.seed)
    torch.use_deterministic_algorithms(True)
    gen = torch.Generator().manual_seed(args.seed)

    net = Net()
    xtr, ytr = make_id(3000, gen)
    opt = torch.optim.Adam(net.parameters(), 3e-3)
    trace = []
    for _ in range(8):
        perm = torch.randperm(len(xtr), generator=gen)
        for b in range(0, len(xtr), 64):
            idx = perm[b : b + 64]
            loss = F.cross_entropy(net(normalize(xtr[idx])), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(loss.item())
        if not np.isfinite(trace[-1]):
            raise SystemExit(f"training diverged: {trace[-20:]}")
    net.eval()

    xte, yte = make_id(128, gen)
    xno = make_noise(128, gen)
    xtx = make_texture(128, gen)
    with torch.no_grad():
        acc = (net(normalize(xte)).argmax(1) == yte).float().mean().item()
    if acc < 0.9:
        raise SystemExit(f"ID accuracy {acc:.3f} below 0.9")

    doc, mapping = graph_document()
    with open(os.path.join(args.out, "model.graph"), "w") as f:
        f.write(doc)

    state = [(k, v.detach().numpy().astype(np.float32))
             for k, v in net.state_dict().items() if not k.endswith("num_batches_tracked")]
    write_archive(os.path.join(args.out, "weights.gwta"), state)

    def dataset(x, y=None):
        items = [("images", normalize(x).numpy().astype(np.float32))]
        if y is not None:
            items.append(("labels", y.numpy().astype(np.int32)))
        return items

    write_archive(os.path.join(args.out, "id_test.gwta"), dataset(xte, yte))
    write_archive(os.path.join(args.out, "ood_noise.gwta"), dataset(xno))
    write_archive(os.path.join(args.out, "ood_texture.gwta"), dataset(xtx))

    ref_x = torch.cat([normalize(xte[:4]), normalize(xno[:2]), normalize(xtx[:2])])
    with torch.no_grad():
        ref_logits = net(ref_x).numpy().astype(np.float32)
    ref_z = gaia_scores(net, ref_x, "z", ["block3", "block4"])
    ref_a = gaia_scores(net, ref_x, "a", ["block3", "block4"])
    ref_bytes = write_archive(
        os.path.join(args.out, "reference.gwta"),
        [
            ("images", ref_x.numpy().astype(np.float32)),
            ("logits", ref_logits),
            ("gaia_z_block3_4", ref_z),
            ("gaia_a_block3_4", ref_a),
        ],
    )

    manifest = {
        "model": "toy4",
        "input_shape": [3, SIZE, SIZE],
        "classes": CLASSES,
        "normalization": {"mean": MEAN, "std": STD},
        "seed": args.seed,
        "id_test_accuracy": acc,
        "final_train_loss": trace[-1],
        "taps": {f"block{i}": f"b{i}_add" for i in range(1, 5)},
        "split": "b4_out",
        "layer_mapping": mapping,
        "reference_inputs": int(ref_x.shape[0]),
        "reference_sha256": hashlib.sha256(ref_bytes).hexdigest(),
        "reference_logits": "reference.gwta",
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote fixture to {args.out} (accuracy {acc:.3f})")


if __name__ == "__main__":
    main()
