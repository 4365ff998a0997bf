from .embed import FileEmbedder, TinyConvEmbedder, embed_images, read_features, write_features
from .fid import GaussianStats, fid, gaussian_stats, sqrtm_psd
from .msssim import DiversityReport, MsSsimWeights, ms_ssim, pairwise_diversity


def fid_between(images_a, images_b, embedder) -> float:
    """FID of two image sets under ``embedder``."""
    return fid(gaussian_stats(embed_images(images_a, embedder)),
               gaussian_stats(embed_images(images_b, embedder)))


__all__ = [
    "DiversityReport", "FileEmbedder", "GaussianStats", "MsSsimWeights", "TinyConvEmbedder",
    "embed_images", "fid", "fid_between", "gaussian_stats", "ms_ssim", "pairwise_diversity",
    "read_features", "sqrtm_psd", "write_features",
]
