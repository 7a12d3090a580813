#!/usr/bin/env python3
"""NIfTI cross-checks against nibabel.

make OUT     write nibabel-authored fixtures plus expected.json
read DIR     print shape, zooms and voxel values of every .nii/.nii.gz in DIR as JSON
"""
import json
import os
import sys

import nibabel as nib
import numpy as np


def make(out):
    os.makedirs(out, exist_ok=True)
    expected = {}

    def save(name, data, zooms, slope=None, inter=None):
        img = nib.Nifti1Image(data, np.diag(list(zooms) + [1.0]))
        img.header.set_zooms(zooms)
        if slope is not None:
            img.header.set_slope_inter(slope, inter)
        path = os.path.join(out, name)
        nib.save(img, path)
        back = nib.load(path)
        values = np.asarray(back.get_fdata(dtype=np.float64))
        expected[name] = {
            "dims": list(values.shape),
            "zooms": [float(z) for z in back.header.get_zooms()[:3]],
            "values": values.flatten(order="F").tolist(),
        }

    save("nib_int16_ramp.nii", np.arange(24, dtype=np.int16).reshape((4, 3, 2), order="F"), (1.0, 1.0, 1.0))
    save("nib_uint8_mask.nii", (np.indices((5, 4, 3)).sum(axis=0) % 2).astype(np.uint8), (0.3, 0.3, 0.3))
    rng = np.random.default_rng(7)
    save("nib_float32.nii", rng.standard_normal((6, 5, 4)).astype(np.float32), (0.5, 0.6, 0.7))
    save("nib_float32.nii.gz", rng.random((3, 4, 5)).astype(np.float32), (1.0, 2.0, 3.0))
    save("nib_int16_scaled.nii", np.arange(-6, 6, dtype=np.int16).reshape((3, 2, 2), order="F"), (1.0, 1.0, 1.0), 0.5, 2.0)
    with open(os.path.join(out, "expected.json"), "w") as f:
        json.dump(expected, f, indent=1, sort_keys=True)


def read(d):
    out = {}
    for name in sorted(os.listdir(d)):
        if not (name.endswith(".nii") or name.endswith(".nii.gz")):
            continue
        img = nib.load(os.path.join(d, name))
        values = np.asarray(img.get_fdata(dtype=np.float64))
        out[name] = {
            "dims": list(values.shape[:3]),
            "zooms": [float(z) for z in img.header.get_zooms()[:3]],
            "values": values.flatten(order="F").tolist(),
        }
    json.dump(out, sys.stdout, sort_keys=True)


if __name__ == "__main__":
    if len(sys.argv) != 3 or sys.argv[1] not in ("make", "read"):
        sys.exit(__doc__)
    {"make": make, "read": read}[sys.argv[1]](sys.argv[2])
