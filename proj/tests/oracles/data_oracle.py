"""Independent references for the data pipeline tests.

mt19937_64 is implemented from its published recurrence and checked against
the standard's 10000th-output value; augmentation draws, rot90/flip maps and
the fold assignment are then replayed on top of it. The NIfTI fixture is
written with nibabel.
"""
import numpy as np
import nibabel as nib
import pathlib

M64 = (1 << 64) - 1


class MT64:
    def __init__(self, seed):
        self.mt = [0] * 312
        self.mt[0] = seed & M64
        for i in range(1, 312):
            self.mt[i] = (6364136223846793005 * (self.mt[i - 1] ^ (self.mt[i - 1] >> 62)) + i) & M64
        self.i = 312

    def __call__(self):
        if self.i >= 312:
            for k in range(312):
                y = (self.mt[k] & 0xFFFFFFFF80000000) | (self.mt[(k + 1) % 312] & 0x7FFFFFFF)
                v = self.mt[(k + 156) % 312] ^ (y >> 1)
                if y & 1:
                    v ^= 0xB5026F5AA96619E9
                self.mt[k] = v
            self.i = 0
        y = self.mt[self.i]
        self.i += 1
        y ^= (y >> 29) & 0x5555555555555555
        y ^= (y << 17) & 0x71D67FFFEDA60000
        y ^= (y << 37) & 0xFFF7EEE000000000
        y ^= y >> 43
        return y & M64


r = MT64(5489)
for _ in range(9999):
    r()
assert r() == 9981545732273789042


def draws(seed, channels):
    r = MT64(seed)
    unit = lambda: (r() >> 11) * 2.0**-53
    flips = [unit() < 0.5 for _ in range(3)]
    k = r() >> 62
    scales = [0.9 + 0.2 * unit() for _ in range(channels)]
    return flips, k, scales


for seed in (1234, 7):
    f, k, s = draws(seed, 4)
    print(f"seed {seed}: flips {f} rot90 {k} scales {[repr(x) for x in s]}")

# Augmented 3x3x3 ramp under seed 1234: flips then np.rot90 on axes (y, x).
f, k, s = draws(1234, 1)
vol = np.arange(27).reshape(3, 3, 3)
for a in range(3):
    if f[a]:
        vol = np.flip(vol, a)
vol = np.rot90(vol, k, axes=(1, 2))
print("ramp", vol.reshape(-1).tolist())


def split(ids, n_folds, seed):
    ids = sorted(ids)
    r = MT64(seed)
    for i in range(len(ids) - 1, 0, -1):
        j = r() % (i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    return {cid: p % n_folds for p, cid in enumerate(ids)}


ids = [f"case_{i:04d}" for i in range(10)]
a = split(ids, 5, 42)
print("folds", [a[c] for c in ids])

out = pathlib.Path(__file__).resolve().parent.parent / "fixtures"
data = (np.arange(60, dtype=np.int16) * 7 - 100).reshape(5, 4, 3)  # (z, y, x)
img = nib.Nifti1Image(np.ascontiguousarray(data.transpose(2, 1, 0)), np.diag([0.5, 0.75, 2.0, 1.0]))
img.header.set_zooms((0.5, 0.75, 2.0))
img.header.set_data_dtype(np.int16)
nib.save(img, out / "nibabel_int16.nii")
print("fixture written; first values", data.reshape(-1)[:4].tolist())
