"""Benchmark and correctness harness: workload generation, history
recording, strict-serializability checking, deterministic simulation."""
