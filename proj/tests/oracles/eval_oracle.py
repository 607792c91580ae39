"""Writes tests/fixtures/eval/{gt,pred}/*.nii and expected.csv.

Metrics are computed by brute force: every boundary voxel against every
boundary voxel of the other mask, no pruning. Run from the repo root.
"""
import math
import os

import nibabel as nib
import numpy as np

SPACING = (2.0, 0.75, 1.25)  # z, y, x; exact in float32
SHAPE = (7, 9, 8)            # z, y, x
OUT = os.path.join("tests", "fixtures", "eval")


def blob(rng, shape, centre, radii):
    z, y, x = np.indices(shape)
    d = ((z - centre[0]) / radii[0]) ** 2 + ((y - centre[1]) / radii[1]) ** 2 + ((x - centre[2]) / radii[2]) ** 2
    return d <= 1.0


def make_labels(rng, jitter):
    lab = np.zeros(SHAPE, np.uint8)
    c = np.array([3.0, 4.0, 3.5]) + jitter
    lab[blob(rng, SHAPE, c, (2.6, 3.6, 3.2))] = 2
    lab[blob(rng, SHAPE, c, (1.6, 2.2, 2.0))] = 3
    lab[blob(rng, SHAPE, c, (0.9, 1.2, 1.1))] = 1
    noise = rng.random(SHAPE) < 0.04
    lab[noise] = rng.integers(0, 4, size=int(noise.sum()))
    return lab


def composites(lab):
    return {"ET": lab == 3, "TC": (lab == 1) | (lab == 3), "WT": lab > 0}


def boundary(m):
    p = np.pad(m, 1)
    inner = p[1:-1, 1:-1, 1:-1]
    nb = [p[:-2, 1:-1, 1:-1], p[2:, 1:-1, 1:-1], p[1:-1, :-2, 1:-1], p[1:-1, 2:, 1:-1], p[1:-1, 1:-1, :-2], p[1:-1, 1:-1, 2:]]
    edge = inner & ~np.logical_and.reduce(nb)
    return [tuple(int(v) for v in pt) for pt in np.argwhere(edge)]


def dist(a, b):
    dz = float(a[0] - b[0]) * SPACING[0]
    dy = float(a[1] - b[1]) * SPACING[1]
    dx = float(a[2] - b[2]) * SPACING[2]
    return math.sqrt(dz * dz + (dy * dy + dx * dx))


def nearest(src, dst):
    return [min(dist(p, q) for q in dst) for p in src]


def pct(values, q):
    v = sorted(values)
    h = q / 100.0 * (len(v) - 1)
    lo = math.floor(h)
    if lo + 1 >= len(v):
        return v[-1]
    return v[lo] + (h - lo) * (v[lo + 1] - v[lo])


def fmt(v):
    return "" if v is None else "%.17g" % v


def case_rows(cid, pred, gt):
    rows = []
    pc, gc = composites(pred), composites(gt)
    for r in ("ET", "TC", "WT"):
        p, g = pc[r], gc[r]
        tp, np_, ng = int((p & g).sum()), int(p.sum()), int(g.sum())
        union = np_ + ng - tp
        d = 1.0 if np_ + ng == 0 else 2.0 * tp / (np_ + ng)
        i = 1.0 if union == 0 else tp / union
        bp, bg = boundary(p), boundary(g)
        if bp and bg:
            a, b = nearest(bp, bg), nearest(bg, bp)
            hd95, hdm = max(pct(a, 95.0), pct(b, 95.0)), max(max(a), max(b))
        else:
            hd95 = hdm = None
        flags = [f for f, on in (("pred_empty", np_ == 0), ("gt_empty", ng == 0)) if on]
        rows.append([cid, "", r, d, i, hd95, hdm, ";".join(flags)])
    return rows


def save(path, lab):
    img = nib.Nifti1Image(np.ascontiguousarray(lab.transpose(2, 1, 0)), np.diag([SPACING[2], SPACING[1], SPACING[0], 1.0]))
    img.header.set_zooms((SPACING[2], SPACING[1], SPACING[0]))
    img.set_data_dtype(np.uint8)
    nib.save(img, path)


def main():
    rng = np.random.default_rng(2024)
    cases = {}
    gt_a = make_labels(rng, np.zeros(3))
    cases["case_a"] = (make_labels(rng, np.array([0.4, -0.6, 0.3])), gt_a)
    gt_b = make_labels(rng, np.array([-0.3, 0.5, 0.0]))
    pred_b = gt_b.copy()
    pred_b[pred_b == 3] = 1  # no enhancing tumour predicted
    cases["case_b"] = (pred_b, gt_b)
    for sub in ("gt", "pred"):
        os.makedirs(os.path.join(OUT, sub), exist_ok=True)
    rows = []
    for cid in sorted(cases):
        pred, gt = cases[cid]
        save(os.path.join(OUT, "gt", cid + ".nii"), gt)
        save(os.path.join(OUT, "pred", cid + ".nii"), pred)
        rows += case_rows(cid, pred, gt)
    lines = ["case_id,fold,region,dice,iou,hd95,hd_max,flags"]
    for r in rows:
        lines.append(",".join([r[0], r[1], r[2], fmt(r[3]), fmt(r[4]), fmt(r[5]), fmt(r[6]), r[7]]))
    for region in ("ET", "TC", "WT"):
        agg = []
        for m in range(4):
            vals = [r[3 + m] for r in rows if r[2] == region and r[3 + m] is not None]
            s = 0.0
            for v in vals:
                s += v
            agg.append(s / len(vals) if vals else None)
        lines.append(",".join(["mean", "all", region] + [fmt(v) for v in agg] + ["aggregate"]))
    with open(os.path.join(OUT, "expected.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))


if __name__ == "__main__":
    main()
