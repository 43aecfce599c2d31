import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen():
    return torch.Generator().manual_seed(1234)


def tiny_encoder(d_model=16, n_layers=2, n_blocks=2, n_heads=2, ff_dim=24,
                 d_img=8, seed=3, **kwargs):
    from modaltune.slide_encoder import EncoderConfig, init_frozen

    cfg = EncoderConfig(d_model=d_model, n_layers=n_layers, n_blocks=n_blocks,
                        n_heads=n_heads, ff_dim=ff_dim, **kwargs)
    return init_frozen(cfg, d_img=d_img, seed=seed)


def tiny_world(site="alpha", n_patients=40, d_img=8, n_genes=24, n_pathways=6,
               seed=5, **kwargs):
    from modaltune.data_harness import CohortSpec, build_world

    spec = CohortSpec(site=site, n_patients=n_patients, d_img=d_img,
                      n_genes=n_genes, n_pathways=n_pathways,
                      marker_pathways=(0, 1), risk_pathways=(2, 3),
                      seed=seed, **kwargs)
    return spec, build_world(spec)


def tiny_adapter(world, d_model=16, n_blocks=2, n_heads=2, d_final=12,
                 n_tasks=3, d_gp=8, n_tokens=4, seed=11, **kwargs):
    from modaltune.modal_adapter import AdapterConfig, ModalAdapter
    from modaltune.modal_encoders import ModalEncoderStack

    stack = ModalEncoderStack(world.pathway_map, d_gp=d_gp, d_model=d_model,
                              n_tokens=n_tokens,
                              generator=torch.Generator().manual_seed(seed + 1))
    cfg = AdapterConfig(d_model=d_model, n_blocks=n_blocks, n_heads=n_heads,
                        d_final=d_final, n_tasks=n_tasks, **kwargs)
    return ModalAdapter(cfg, stack, seed=seed)


def random_bag(n_img=5, d_img=8, seed=21, patient_id="p0"):
    from modaltune.slide_encoder import FeatureBag

    gen = torch.Generator().manual_seed(seed)
    return FeatureBag(patient_id=patient_id,
                      features=torch.randn(n_img, d_img, generator=gen))
