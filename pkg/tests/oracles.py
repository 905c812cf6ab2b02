"""Independent brute-force implementations used as test oracles.

Everything here is written with plain python loops, separately from the
library's vectorized code paths.
"""


def brute_force_roc(genuine, impostor, tar_fars=(1e-1, 1e-2, 1e-3, 1e-4)):
    genuine = [float(s) for s in genuine]
    impostor = [float(s) for s in impostor]
    thresholds = sorted(set(genuine) | set(impostor), reverse=True)
    points = [(0.0, 0.0)]
    for t in thresholds:
        far = sum(1 for s in impostor if s >= t) / len(impostor)
        tar = sum(1 for s in genuine if s >= t) / len(genuine)
        points.append((far, tar))

    auc = 0.0
    for (f0, t0), (f1, t1) in zip(points, points[1:]):
        auc += (f1 - f0) * (t1 + t0) / 2.0

    eer = None
    prev = None
    for far, tar in points:
        frr = 1.0 - tar
        d = far - frr
        if d == 0.0:
            eer = far
            break
        if prev is not None and prev[0] < 0.0 < d:
            d0, f0, d1, f1 = prev[0], prev[1], d, far
            lam = -d0 / (d1 - d0)
            eer = f0 + lam * (f1 - f0)
            break
        prev = (d, far)

    # upper envelope, then piecewise-linear TAR at each requested FAR
    env = {}
    order = []
    for far, tar in points:
        if far not in env:
            env[far] = tar
            order.append(far)
        else:
            env[far] = max(env[far], tar)
    xs = order
    tar_at = {}
    for target in tar_fars:
        if target <= xs[0]:
            tar_at[target] = env[xs[0]]
            continue
        val = env[xs[-1]]
        for x0, x1 in zip(xs, xs[1:]):
            if x0 <= target <= x1:
                if x1 == x0:
                    val = env[x1]
                else:
                    lam = (target - x0) / (x1 - x0)
                    val = env[x0] + lam * (env[x1] - env[x0])
                break
        tar_at[target] = val
    return points, auc, eer, tar_at


def brute_force_cmc(similarity_tables, true_classes, max_rank):
    """similarity_tables: per probe, {class: score}. Ties: lower class wins."""
    curve = [0.0] * max_rank
    for sims, true in zip(similarity_tables, true_classes):
        better = 0
        for label, s in sims.items():
            if label == true:
                continue
            if s > sims[true] or (s == sims[true] and label < true):
                better += 1
        rank = better  # 0-based position of the true class
        for k in range(rank, max_rank):
            curve[k] += 1.0
    return [c / len(true_classes) for c in curve]


def brute_force_spearman(a, b):
    def avg_ranks(x):
        n = len(x)
        ranks = [0.0] * n
        for i in range(n):
            less = sum(1 for v in x if v < x[i])
            equal = sum(1 for v in x if v == x[i])
            ranks[i] = less + (equal + 1) / 2.0
        return ranks

    ra, rb = avg_ranks(list(a)), avg_ranks(list(b))
    ma = sum(ra) / len(ra)
    mb = sum(rb) / len(rb)
    num = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    da = sum((x - ma) ** 2 for x in ra) ** 0.5
    db = sum((y - mb) ** 2 for y in rb) ** 0.5
    return num / (da * db)
