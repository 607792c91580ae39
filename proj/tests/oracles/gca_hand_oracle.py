"""Step-by-step scalar evaluation of the GATv2 aggregation and the GCA block
for the tiny fixtures used in attention_test.cpp. Pure Python, no numpy."""
import math

def leaky(v, slope=0.2):
    return v if v > 0 else slope * v

def gat(h, nbrs, ws, wd, a, slope=0.2):
    out = []
    for i in range(len(h)):
        js = [i] + nbrs[i]
        e = [a * leaky(ws * h[j] + wd * h[i], slope) for j in js]
        m = max(e)
        ex = [math.exp(v - m) for v in e]
        z = sum(ex)
        al = [v / z for v in ex]
        out.append(sum(al[k] * ws * h[js[k]] for k in range(len(js))))
    return out

# 3-node path 0-1-2
h = [1.0, -2.0, 0.5]
nbrs = [[1], [0, 2], [1]]
print("path", [repr(v) for v in gat(h, nbrs, 0.7, -1.1, 0.9)])

# GCA on a 2x1x1 grid, C = 1
x = [0.5, -1.0]
nb2 = [[1], [0]]
q = gat(x, nb2, 0.8, -0.3, 1.5)
k = gat(x, nb2, -0.6, 0.4, 0.7)
v = gat(x, nb2, 1.2, 0.5, -0.9)
out = []
for i in range(2):
    e = [q[i] * k[j] for j in range(2)]  # d_k = 1, so the scale is 1
    m = max(e)
    ex = [math.exp(t - m) for t in e]
    z = sum(ex)
    att = [t / z for t in ex]
    o = sum(att[j] * v[j] for j in range(2))
    enh = 0.7 * o + x[i]
    out.append(0.3 * enh + 0.6 * x[i] + 0.1)
print("gca", [repr(t) for t in out])
