from .kernels import BACKEND

__all__ = ["BACKEND"]
