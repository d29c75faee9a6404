"""Brute-force classic cellular automaton on a closed ring.

Independent reference implementation: point vehicles on a periodic lattice,
the plain four-stage update (accelerate, gap-brake, dawdle with a single p,
move), one uniform draw per vehicle per step in index order. Used to check
the simulator's degenerate mode state-for-state and to measure flows.
"""

from hybridflow.rng import substream


def simulate(n_cells, positions, v_max, p, seed, steps):
    """Run the classic CA; returns per-step (positions, velocities) tuples."""
    pos = list(positions)
    vel = [0] * len(pos)
    n = len(pos)
    rng = substream(seed, "traffic")
    history = []
    for _ in range(steps):
        order = sorted(range(n), key=lambda i: pos[i])
        nxt = {}
        for k, i in enumerate(order):
            nxt[i] = order[(k + 1) % n]
        new_vel = [0] * n
        for i in range(n):
            v = min(vel[i] + 1, v_max)
            if n > 1:
                gap = (pos[nxt[i]] - pos[i] - 1) % n_cells
            else:
                gap = n_cells - 1
            v = min(v, gap)
            u = rng.random()
            if u < p:
                v = max(v - 1, 0)
            new_vel[i] = v
        vel = new_vel
        pos = [(pos[i] + vel[i]) % n_cells for i in range(n)]
        history.append((tuple(pos), tuple(vel)))
    return history


def flow_at_cell(history, n_cells, cell, t0, t1):
    """Vehicles whose front crossed ``cell`` during steps (t0, t1]."""
    count = 0
    for t in range(t0, t1):
        pos_now, vel_now = history[t]
        for i, v in enumerate(vel_now):
            if v == 0:
                continue
            prev = (pos_now[i] - v) % n_cells
            # crossed cells prev+1 .. prev+v (mod ring)
            for k in range(1, v + 1):
                if (prev + k) % n_cells == cell:
                    count += 1
                    break
    return count
