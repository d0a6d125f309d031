"""Desk-scale multi-tenant LoRA serving: kernels, CPU-assisted prefill, rank-aware scheduling."""
