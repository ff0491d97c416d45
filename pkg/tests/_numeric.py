"""Central finite-difference gradient checking shared by unit and acceptance tests."""

import torch


def fd_relative_error(fn, tensors, eps=1e-6):
    """||analytic - numeric|| / max(||analytic||, ||numeric||) over all entries of all tensors.

    ``fn`` maps the list of tensors to a scalar; tensors must be float64 leaves. The norm is
    taken over the concatenated gradient, so tensors whose true gradient is identically zero
    (a bias feeding batch-norm) do not turn roundoff into a ratio of two tiny numbers.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad_(True)
    fn(tensors).backward()
    analytics, numerics = [], []
    for t in tensors:
        analytic = t.grad.detach().clone()
        numeric = torch.zeros_like(t)
        flat = t.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = fn(tensors).item()
                flat[i] = orig - eps
                down = fn(tensors).item()
                flat[i] = orig
            numeric.view(-1)[i] = (up - down) / (2 * eps)
        analytics.append(analytic.reshape(-1))
        numerics.append(numeric.reshape(-1))
    a, n = torch.cat(analytics), torch.cat(numerics)
    return ((a - n).norm() / max(a.norm().item(), n.norm().item(), 1e-300)).item()


def encoder_gradient_error(seed=0):
    from eegrecon.encoder import EncoderConfig, build_encoder

    cfg = EncoderConfig(n_channels=3, n_timesteps=6, output_shape=(5,), rnn_layers=2, hidden_dim=4,
                        head_hidden_dim=4)
    enc = build_encoder(cfg, seed=seed).double().train()
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 3, 6, generator=g, dtype=torch.float64)
    w = torch.randn(4, 5, generator=g, dtype=torch.float64)
    params = list(enc.parameters())

    def loss(_):
        return (enc(x) * w).sum()

    return fd_relative_error(loss, params)


def attention_gradient_error(seed=0):
    from eegrecon.generation.attention import decoupled_cross_attention

    g = torch.Generator().manual_seed(seed)
    shapes = [(3, 4), (2, 4), (2, 4), (5, 4), (5, 4)]
    tensors = [torch.randn(*s, generator=g, dtype=torch.float64) for s in shapes]
    lam = torch.tensor(0.7, dtype=torch.float64)
    w = torch.randn(3, 4, generator=g, dtype=torch.float64)

    def loss(ts):
        return (decoupled_cross_attention(*ts[:5], ts[5]) * w).sum()

    return fd_relative_error(loss, tensors + [lam])
