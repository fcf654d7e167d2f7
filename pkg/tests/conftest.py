import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)
settings.register_profile("zsrl", deadline=None, max_examples=30, derandomize=True)
settings.load_profile("zsrl")


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float):
    from zsrl.envs import FiniteMDP

    p = rng.random((n_states, n_actions, n_states)) ** 3
    p /= p.sum(-1, keepdims=True)
    rho = rng.random(n_states)
    rho /= rho.sum()
    return FiniteMDP(p, rho, gamma, np.zeros(n_states, bool))


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int):
    pi = rng.random((n_states, n_actions))
    return pi / pi.sum(-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def fd_check(loss_fn, params: dict, n_coords: int = 12, h: float = 1e-5, seed: int = 0, floor: float = 1e-4):
    """Compare autograd against central differences at sampled coordinates; returns worst relative error.

    ``params`` maps names to float64 leaf tensors; ``loss_fn()`` reads them.
    """
    import torch

    for p in params.values():
        p.requires_grad_(True)
        p.grad = None
    loss = loss_fn()
    names = list(params)
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    grads = {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)}
    gen = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_coords):
            k = names[gen.integers(len(names))]
            p = params[k]
            i = int(gen.integers(p.numel()))
            flat = p.view(-1)
            old = flat[i].item()
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            fd = (up - down) / (2 * h)
            ad = grads[k].view(-1)[i].item()
            worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), floor))
    return worst


@pytest.fixture
def float64():
    import torch

    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def small_fb_config(**kw):
    from zsrl.fb import FBConfig

    base = dict(
        z_dim=4, preprocessor_hidden=(8,), preprocessor_out=8, forward_hidden=(8,),
        backward_hidden=(8,), actor_hidden=(8,), batch_size=16,
    )
    base.update(kw)
    return FBConfig(**base)


# three-state, two-action MDP whose transition entries are multiples of 1/4, so a
# dataset listing each (s, a) with next states in proportion to P is an exact expectation
TABULAR_P = np.array(
    [
        [[0.5, 0.25, 0.25], [0.0, 0.75, 0.25]],
        [[0.25, 0.0, 0.75], [0.5, 0.5, 0.0]],
        [[0.0, 0.25, 0.75], [0.75, 0.0, 0.25]],
    ]
)
TABULAR_PI = np.array([[0.5, 0.5], [0.25, 0.75], [1.0, 0.0]])


def train_tabular_fb(steps: int = 3000, gamma: float = 0.9, lr: float = 0.05, nu: float = 0.05):
    """Full-batch TD training of a tabular F against one-hot B.

    Returns ``(estimate, oracle)`` where ``estimate[s, a, s+] = F(s, a)[s+] rho(s+)``.
    """
    import torch

    from zsrl.envs import FiniteMDP
    from zsrl.fb import FBModel, FixedPolicy, OneHotBackward, TabularForward, fb_td_loss
    from zsrl.oracle import exact_successor_measure

    mdp = FiniteMDP(TABULAR_P, np.ones(3) / 3, gamma, np.zeros(3, bool))
    oracle = exact_successor_measure(mdp, TABULAR_PI)
    rows = []
    for s in range(3):
        for a in range(2):
            for sp in range(3):
                rows += [(s, a, sp)] * int(round(TABULAR_P[s, a, sp] * 4))
    rows = np.array(rows)
    eye = torch.eye(3, dtype=torch.float64)
    obs, act, nxt = eye[rows[:, 0]], torch.as_tensor(rows[:, 1]), eye[rows[:, 2]]
    rho = np.bincount(rows[:, 2], minlength=3) / len(rows)
    model = FBModel(TabularForward(3, 2, 3), OneHotBackward(), FixedPolicy(TABULAR_PI), 3, gamma)
    opt = torch.optim.Adam(model.forward_net.parameters(), lr=lr)
    z = torch.zeros(len(rows), 3, dtype=torch.float64)
    for _ in range(steps):
        loss = fb_td_loss(model, obs, act, nxt, nxt, z)
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.update_targets(nu)
    return model.forward_net.table.detach().numpy() * rho, oracle


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
