"""Numpy implementation of the path kernels, vectorised across paths.

Raw word layout per path (shared with the compiled kernel):
  words [2k, 2k+1]          Box-Muller pair for the Brownian increment of step k
  words 2K + 4q + (0..3)    proposal slot q: clock exponential, target uniform,
                            Box-Muller pair for the bridge normal at the proposal
"""

import numpy as np

_TWO_M53 = 2.0**-53
_BELOW_ONE = 1.0 - _TWO_M53  # (2^53 - 0.5) * 2^-53 would round up to 1
OK, OVERFLOW, CAP_EXCEEDED = 0, 1, 2


def uniform_open(words):
    """Map raw 64-bit words to doubles in (0, 1)."""
    return np.minimum(((words >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53, _BELOW_ONE)


def box_muller(w1, w2):
    return np.sqrt(-2.0 * np.log(uniform_open(w1))) * np.cos(2.0 * np.pi * uniform_open(w2))


def simulate_chunk(raw, times, s0, j0, r, mu, sigma, gamma, lam_a, lam_b, lam_cap, width,
                   s_out, regime_out, dW_out, dN_out, comp_out, int_r_out, used_out):
    n_paths = raw.shape[0]
    n_steps = len(times) - 1
    base = 2 * n_steps
    rate_bound = lam_cap.sum(axis=0)
    feedback = bool(np.any(lam_b))

    status = np.zeros(n_paths, dtype=np.int8)
    s = np.full(n_paths, float(s0))
    j = np.full(n_paths, int(j0), dtype=np.int64)
    q = np.zeros(n_paths, dtype=np.int64)
    clock = -np.log(uniform_open(raw[:, base]))
    rows = np.arange(n_paths)

    s_out[:, 0] = s
    regime_out[:, 0] = j
    dN_out[:] = 0.0
    comp_out[:] = 0.0
    int_r_out[:] = 0.0
    for k in range(n_steps):
        h = times[k + 1] - times[k]
        w_rem = np.sqrt(h) * box_muller(raw[:, 2 * k], raw[:, 2 * k + 1])
        dW_out[:, k] = w_rem
        rem = np.full(n_paths, h)
        active = status == OK
        while np.any(active):
            idx = rows[active]
            ji = j[idx]
            si = s[idx]
            bound = rate_bound[ji]
            lam = lam_a[:, ji] + lam_b[:, ji] * si if feedback else lam_a[:, ji]
            lam = np.maximum(lam, 0.0)
            with np.errstate(divide="ignore"):
                wait = np.where(bound > 0, clock[idx] / np.where(bound > 0, bound, 1.0), np.inf)
            event = wait < rem[idx]
            dt = np.where(event, wait, rem[idx])

            qi = q[idx]
            col = base + 4 * qi
            z = box_muller(raw[idx, col + 2], raw[idx, col + 3])
            rem_i = rem[idx]
            bridge = dt / rem_i * w_rem[idx] + np.sqrt(np.maximum(dt * (rem_i - dt) / rem_i, 0.0)) * z
            inc = np.where(event, bridge, w_rem[idx])

            drift = mu[ji] - np.sum(gamma[:, ji] * lam, axis=0)
            s[idx] = si * np.exp((drift - 0.5 * sigma[ji] ** 2) * dt + sigma[ji] * inc)
            if feedback:
                # trapezoid in time: the intensity moves with s
                lam_end = np.maximum(lam_a[:, ji] + lam_b[:, ji] * s[idx], 0.0)
                comp_out[idx, k, :] += (0.5 * (lam + lam_end) * dt).T
            else:
                comp_out[idx, k, :] += (lam * dt).T
            int_r_out[idx, k] += r[ji] * dt
            w_rem[idx] -= inc
            rem[idx] = rem_i - dt
            clock[idx] = np.where(event, 0.0, clock[idx] - dt * bound)

            # paths that reached the end of the step
            done = idx[~event]
            active[done] = False

            ev = idx[event]
            if ev.size == 0:
                continue
            jv = j[ev]
            sv = s[ev]
            lam_ev = lam_a[:, jv] + lam_b[:, jv] * sv if feedback else lam_a[:, jv]
            lam_ev = np.maximum(lam_ev, 0.0)
            over = np.any(lam_ev > lam_cap[:, jv] * (1 + 1e-12), axis=0)
            status[ev[over]] = CAP_EXCEEDED
            qv = q[ev]
            u = uniform_open(raw[ev, base + 4 * qv + 1]) * rate_bound[jv]
            cum = np.cumsum(lam_ev, axis=0)
            target = np.argmax(u[None, :] < cum, axis=0)
            accepted = u < cum[-1]
            acc = ev[accepted]
            tj = target[accepted]
            src = j[acc]
            s[acc] *= 1.0 + gamma[tj, src]
            j[acc] = tj
            dN_out[acc, k, tj] += 1.0

            qn = qv + 1
            overflow = qn >= width
            status[ev[overflow & ~over]] = OVERFLOW
            q[ev] = qn
            ok = ev[~overflow]
            clock[ok] = -np.log(uniform_open(raw[ok, base + 4 * q[ok]]))
            active[ev[over | overflow]] = False
        s_out[:, k + 1] = s
        regime_out[:, k + 1] = j
    used_out[:] = q
    return status
