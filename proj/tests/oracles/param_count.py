# Layer-by-layer parameter count for the segmentation network.
def conv(cin, cout, k):
    return cout * cin * k ** 3 + cout

def gca(c):
    gat = 2 * c * c + c  # w_src, w_dst, att (one head)
    return 3 * gat + 1 + conv(2 * c, c, 1)

def count(cin=4, classes=4, w=16, stages=3, k=3, blocks=1, deep_sup=True):
    widths = [w * 2 ** s for s in range(stages)]
    n = 0
    prev = cin
    for s in range(stages - 1):
        for b in range(blocks):
            n += conv(prev if b == 0 else widths[s], widths[s], k)
        prev = widths[s]
        n += conv(widths[s], widths[s], 2)
    for b in range(blocks):
        n += conv(prev if b == 0 else widths[-1], widths[-1], k)
    for s in range(stages - 1):
        n += widths[s + 1] * widths[s] * 8 + widths[s]
        for b in range(blocks):
            n += conv(2 * widths[s] if b == 0 else widths[s], widths[s], k)
        n += gca(widths[s])
    n += conv(widths[0], classes, 1)
    if deep_sup:
        n += sum(conv(widths[r], classes, 1) for r in range(1, stages))
    return n

if __name__ == "__main__":
    print("default", count())
    print("no_deep_sup", count(deep_sup=False))
    print("M", count(w=32, blocks=2))
    print("S2", count(w=8, stages=2))
