"""Independent re-implementations used as test oracles (plain Python, no numpy maths)."""
import math
import statistics


def mad_aggregate(rows, valid, k, rule, weight, floor=1e-6):
    """Brute-force robust aggregation over lists of floats.

    Returns (inliers, consistent, final) with final[j] None for invalid views.
    """
    n, d = len(rows), len(rows[0])
    obs = [rows[j] for j in range(n) if valid[j]]
    med = [statistics.median(r[c] for r in obs) for c in range(d)]
    inliers = []
    if rule == "component":
        spread = [statistics.median(abs(r[c] - med[c]) for r in obs) for c in range(d)]
        for j in range(n):
            ok = valid[j]
            for c in range(d):
                if not abs(rows[j][c] - med[c]) <= k * (spread[c] + floor):
                    ok = False
            inliers.append(ok)
    else:
        dist = [math.sqrt(sum((rows[j][c] - med[c]) ** 2 for c in range(d))) for j in range(n)]
        spread = statistics.median(dist[j] for j in range(n) if valid[j])
        inliers = [bool(valid[j] and dist[j] <= k * (spread + floor)) for j in range(n)]
    if any(inliers):
        total = [0.0] * d
        for j in range(n):
            if inliers[j]:
                for c in range(d):
                    total[c] += rows[j][c]
        mean = [t / sum(inliers) for t in total]
    else:
        mean = list(med)
    consistent = _unit(mean)
    final = [
        _unit([weight * rows[j][c] + (1.0 - weight) * consistent[c] for c in range(d)]) if valid[j] else None
        for j in range(n)
    ]
    return inliers, consistent, final


def _unit(v):
    norm = 0.0
    for x in v:
        norm += x * x
    norm = math.sqrt(norm)
    return [x / norm for x in v] if norm > 0 else list(v)


def relevancy(feature, query, canonicals):
    """Scalar relevancy score from cosine similarities."""
    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    sq = cos(feature, query)
    worst = max(cos(feature, c) for c in canonicals)
    return 1.0 / (1.0 + math.exp(-(sq - worst)))
