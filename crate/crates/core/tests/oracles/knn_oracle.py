"""Nearest-neighbour separability baseline over a generated dataset.

Usage: knn_oracle.py DATASET_DIR

Every PNG under a class subdirectory is read as raw 8-bit pixels scaled to
[0, 1]. Samples are ordered by id (``class/stem``); every fifth one is held
out. Each held-out image takes the majority class among its 5 nearest
training images by Euclidean distance, ties going to the class of the
nearest voter. Prints the number of correct predictions and the total.
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

K = 5


def load(root):
    rows = []
    for path in sorted(root.glob("*/*.png")):
        sample_id = f"{path.parent.name}/{path.stem}"
        pixels = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
        rows.append((sample_id, path.parent.name, pixels.ravel()))
    rows.sort(key=lambda r: r[0])
    return rows


def main():
    rows = load(Path(sys.argv[1]))
    train = [r for i, r in enumerate(rows) if i % 5 != 0]
    test = [r for i, r in enumerate(rows) if i % 5 == 0]
    x = np.stack([r[2] for r in train])
    labels = [r[1] for r in train]
    correct = 0
    for _, label, pixels in test:
        dist = ((x - pixels) ** 2).sum(axis=1)
        nearest = np.argsort(dist, kind="stable")[:K]
        votes = {}
        for j in nearest:
            votes[labels[j]] = votes.get(labels[j], 0) + 1
        top = max(votes.values())
        pick = next(labels[j] for j in nearest if votes[labels[j]] == top)
        correct += pick == label
    print(correct, len(test))


if __name__ == "__main__":
    main()
