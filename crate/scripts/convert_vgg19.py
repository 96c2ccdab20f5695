#!/usr/bin/env python3
"""Convert torchvision VGG-19 weights to the synthrefine weight file format.

Usage:
    convert_vgg19.py OUT.bin [--state-dict vgg19.pth] [--random-init SEED]

With --state-dict the file is read with torch.load; it may be the state dict
of a full torchvision ``vgg19`` model or of its ``features`` submodule.
Without it, torchvision's pretrained ImageNet weights are fetched (network
access needed). --random-init writes a randomly initialised network instead,
which is only useful for testing the format.

torchvision normalises inputs as (x - mean) / std per channel. The extractor
computes x * scale - mean, so 1/std is folded into conv1_1's weights and the
file stores scale = 1 and the torchvision mean.
"""

import argparse
import struct
import sys

import numpy as np

TAPS = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2",
    "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4",
    "conv5_1", "conv5_2", "conv5_3", "conv5_4",
]
# Indices of the convolutions inside torchvision's vgg19().features.
FEATURE_INDICES = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34]
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def write_record(out, name, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    encoded = name.encode("utf-8")
    out.write(struct.pack("<I", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<I", array.ndim))
    for d in array.shape:
        out.write(struct.pack("<I", d))
    out.write(array.tobytes(order="C"))


def load_state_dict(args):
    import torch
    import torchvision

    if args.random_init is not None:
        torch.manual_seed(args.random_init)
        return torchvision.models.vgg19(weights=None).state_dict()
    if args.state_dict:
        return torch.load(args.state_dict, map_location="cpu")
    return torchvision.models.vgg19(weights="IMAGENET1K_V1").state_dict()


def conv_tensors(state, index):
    for prefix in (f"features.{index}.", f"{index}."):
        if prefix + "weight" in state:
            return state[prefix + "weight"].numpy(), state[prefix + "bias"].numpy()
    sys.exit(f"state dict has no convolution at features index {index}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out")
    parser.add_argument("--state-dict")
    parser.add_argument("--random-init", type=int)
    args = parser.parse_args()

    state = load_state_dict(args)
    with open(args.out, "wb") as out:
        for tap, index in zip(TAPS, FEATURE_INDICES):
            weight, bias = conv_tensors(state, index)
            if tap == "conv1_1":
                weight = weight / IMAGENET_STD[None, :, None, None]
            write_record(out, f"{tap}.weight", weight)
            write_record(out, f"{tap}.bias", bias)
        write_record(out, "input.scale", np.array([1.0], dtype=np.float32))
        write_record(out, "input.mean", IMAGENET_MEAN)


if __name__ == "__main__":
    main()
