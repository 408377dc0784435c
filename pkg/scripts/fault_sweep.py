#!/usr/bin/env python3
"""Sweep fault probabilities and measure wire amplification.

For each drop/duplicate/reorder setting, pushes a batch of messages
through a single-threaded loopback world and reports how many frames the
reliability engine needed relative to the lossless minimum. Fully
deterministic for a given seed.
"""

import argparse
import random
import sys

sys.path.insert(0, "src")

from softverbs.fabric import FaultProfile, LoopbackFabric
from softverbs.verbs import DeviceRegistry, WcStatus
from softverbs.wire import FrameKind

sys.path.insert(0, "tests")
from conftest import Node, connect_pair  # reuse the two-node scaffolding


def run_batch(drop, dup, reorder, seed, n_msgs, size, mtu):
    registry = DeviceRegistry()
    registry.add_device("hca0")
    fabric = LoopbackFabric(
        faults=FaultProfile(drop, dup, reorder, seed), registry=registry)
    a = Node(registry, fabric, size=n_msgs * size, max_send_wr=n_msgs,
             max_recv_wr=n_msgs, cq_capacity=n_msgs + 1)
    b = Node(registry, fabric, size=n_msgs * size, max_send_wr=n_msgs,
             max_recv_wr=n_msgs, cq_capacity=n_msgs + 1)
    connect_pair(a, b, mtu=mtu)
    rng = random.Random(seed)
    payloads = [rng.randbytes(size) for _ in range(n_msgs)]
    for i in range(n_msgs):
        b.post_recv(i, off=i * size, length=size)
    for i, payload in enumerate(payloads):
        a.post_send(i, payload, off=i * size)
    fabric.run_until_idle(max_events=5_000_000)
    recv = b.cq.poll(n_msgs + 1)
    ok = (len(recv) == n_msgs
          and all(wc.status is WcStatus.SUCCESS for wc in recv)
          and all(b.read(i * size, size) == payloads[i]
                  for i in range(n_msgs)))
    data_frames = sum(1 for e in fabric.trace
                      if e.frame.kind is FrameKind.DATA)
    minimum = n_msgs * -(-size // mtu)
    return ok, data_frames, minimum


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--messages", type=int, default=200)
    parser.add_argument("--size", type=int, default=4096)
    parser.add_argument("--mtu", type=int, default=1024)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    print(f"{'drop':>6} {'dup':>6} {'reorder':>8} {'delivered':>10} "
          f"{'frames':>8} {'amplification':>14}")
    for drop in (0.0, 0.05, 0.1, 0.2, 0.3):
        for dup, reorder in ((0.0, 0.0), (0.1, 0.1)):
            ok, frames, minimum = run_batch(
                drop, dup, reorder, args.seed, args.messages, args.size,
                args.mtu)
            print(f"{drop:>6.2f} {dup:>6.2f} {reorder:>8.2f} "
                  f"{'all' if ok else 'FAILED':>10} {frames:>8} "
                  f"{frames / minimum:>13.2f}x")


if __name__ == "__main__":
    main()
