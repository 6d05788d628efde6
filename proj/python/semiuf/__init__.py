"""Python bindings for the semiuf dehazing library."""

from ._core import (
    Model,
    evaluate,
    generate_dataset,
    gradcheck,
    gradcheck_items,
    loss_kl,
    loss_ue,
    loss_ugs,
    lr_at,
    psnr,
    select_branch,
    ssim,
    train_student,
    train_teacher,
)

__all__ = [
    "Model",
    "evaluate",
    "generate_dataset",
    "gradcheck",
    "gradcheck_items",
    "loss_kl",
    "loss_ue",
    "loss_ugs",
    "lr_at",
    "psnr",
    "select_branch",
    "ssim",
    "train_student",
    "train_teacher",
]
