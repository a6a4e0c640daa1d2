"""Sparse-attention neural motion planning on synthetic BEV scenes."""
