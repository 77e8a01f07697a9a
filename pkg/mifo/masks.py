from typing import Callable, Optional, Tuple, Union

import numpy as np


class MaskDrawFunctionException(Exception):
    pass


def bernoulli(n: int, rate: float, rng: np.random.Generator,
              scores: Optional[np.ndarray] = None) -> np.ndarray:
    # keep iff u >= rate, so rate 0 keeps everything and rate 1 drops everything
    return rng.random(n) >= rate


def topk(n: int, rate: float, rng: np.random.Generator,
         scores: Optional[np.ndarray] = None) -> np.ndarray:
    if scores is None or len(scores) != n:
        raise ValueError("topk selection needs one score per entry")
    n_drop = int(np.floor(rate * n + 1e-9))
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = np.ones(n, dtype=bool)
    keep[order[:n_drop]] = False
    return keep


def random(n: int, rate: float, rng: np.random.Generator,
           scores: Optional[np.ndarray] = None) -> np.ndarray:
    n_drop = int(np.floor(rate * n + 1e-9))
    keep = np.ones(n, dtype=bool)
    keep[rng.choice(n, size=n_drop, replace=False)] = False
    return keep


mask_draw_fun_dict = {
    'bernoulli': bernoulli,
    'topk': topk,
    'random': random,
}


def draw_mask(t: Union[str, Callable], n: int, rate: float, rng: np.random.Generator,
              scores: Optional[np.ndarray] = None) -> Tuple[np.ndarray, int]:
    """draw a keep mask over `n` entries
    Args:
        t (str|callable): the selection rule. Either 'bernoulli' (i.i.d. drop with probability `rate`),
        'topk' (drop the floor(rate * n) entries with the largest `scores`, ties to the earliest entry)
        or 'random' (drop floor(rate * n) entries uniformly without replacement).
        If `t` is a callable, must take (n, rate, rng, scores) and return a boolean vector of size `n`
        n (int): the number of entries
        rate (float): the drop rate in [0, 1]
        rng (np.random.Generator): the random stream to draw from
        scores (np.ndarray, optional): per-entry scores, required by 'topk'
    Returns:
        Tuple[np.ndarray, int]: a boolean keep mask of size `n` and the number of dropped entries
    """

    if isinstance(t, str):
        mask_draw_fun = mask_draw_fun_dict.get(t)
        if mask_draw_fun is None:
            raise MaskDrawFunctionException("Selection rule specified is not supported or there is a typo.")
    elif callable(t):
        mask_draw_fun = t
    elif t is None:
        raise MaskDrawFunctionException("`t` must be specified")
    else:
        raise ValueError(f"t can be string or callable, but got {type(t)}")

    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")

    keep = np.asarray(mask_draw_fun(n=n, rate=rate, rng=rng, scores=scores), dtype=bool)
    if keep.shape != (n,):
        raise ValueError(f"selection rule returned shape {keep.shape}, expected ({n},)")

    return keep, int(n - keep.sum())
