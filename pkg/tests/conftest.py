import pytest
import torch

torch.manual_seed(0)


@pytest.fixture(scope="session")
def synthetic_latents():
    """Smooth random clips standing in for encoded video: (N, F, C, H, W).

    A slow drift over frames gives the temporal layers something learnable.
    """
    import torch.nn.functional as F

    g = torch.Generator().manual_seed(1234)
    n, f, c, h, w = 12, 32, 4, 8, 8
    coarse = torch.randn(n, c, 2, 2, generator=g)
    base = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
    base = base.unsqueeze(1)
    drift = torch.randn(n, 1, c, 1, 1, generator=g) * 0.01
    t = torch.arange(f).reshape(1, f, 1, 1, 1).float()
    clips = base + drift * t + 0.02 * torch.randn(n, f, c, h, w, generator=g)
    return clips
