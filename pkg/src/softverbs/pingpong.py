"""The pingpong benchmark: resource setup, connect, send/recv loop, report.

Two processes (or two threads on the loopback fabric) bounce a fixed-size
message back and forth. The client owns the first send; each side posts
a window of receives up front and reposts when the pool runs low, so the
peer never catches an empty receive queue.
"""

from __future__ import annotations

import ipaddress
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from . import verbs
from .oob import DEFAULT_PORT, Destination, exchange_as_client, exchange_as_server
from .verbs import (
    AccessFlags,
    AddressHandle,
    AttrMask,
    ModifyAttributes,
    QpState,
    QpType,
    QueueCaps,
    ReceiveWorkRequest,
    ScatterGatherElement,
    SendWorkRequest,
    VerbsError,
    WcStatus,
)

RECV_WRID = 1
SEND_WRID = 2

CLIENT_FILL = 0x7B  # server buffers start one higher


class PingpongError(Exception):
    pass


@dataclass
class PingpongConfig:
    server_host: Optional[str] = None  # absent means server role
    oob_port: int = DEFAULT_PORT
    ib_port: int = 1
    size: int = 4096
    rx_depth: int = 500
    iters: int = 1000
    use_event: bool = False
    sl: int = 0
    mtu: int = 1024
    gid_index: Optional[int] = None

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be >= 1")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.rx_depth < 1:
            raise ValueError("rx_depth must be >= 1")

    @property
    def is_server(self) -> bool:
        return self.server_host is None


@dataclass
class RunStats:
    bytes_total: int
    elapsed: float
    iters: int


@dataclass
class PingpongContext:
    context: verbs.DeviceContext
    channel: Optional[verbs.CompletionChannel]
    pd: verbs.ProtectionDomain
    mr: verbs.MemoryRegion
    cq: verbs.CompletionQueue
    qp: verbs.QueuePair
    buf: verbs.Buffer
    size: int
    rx_depth: int
    routs: int = 0
    pending: int = 0
    portinfo: Optional[verbs.PortAttributes] = None
    # instrumentation: final counters and flow-control checkpoints
    rcnt: int = 0
    scnt: int = 0
    min_routs: Optional[int] = None
    reposts: list[tuple[int, int]] = field(default_factory=list)


def init_context(registry: verbs.DeviceRegistry,
                 cfg: PingpongConfig) -> PingpongContext:
    """Allocate the whole resource chain and park the QP in INIT."""
    devices = registry.get_device_list()
    if not devices:
        raise PingpongError("No IB devices found")
    try:
        context = registry.open_device(devices[0])
    except VerbsError as exc:
        raise PingpongError(
            f"Couldn't get context for {devices[0].name}") from exc
    try:
        buf = context.alloc_buffer(cfg.size, align=verbs.PAGE_SIZE)
    except VerbsError as exc:
        raise PingpongError("Couldn't allocate work buf.") from exc
    buf.fill(CLIENT_FILL + (1 if cfg.is_server else 0))
    channel = context.create_channel() if cfg.use_event else None
    try:
        pd = context.alloc_pd()
    except VerbsError as exc:
        raise PingpongError("Couldn't allocate PD") from exc
    try:
        mr = pd.reg_mr(buf, cfg.size, AccessFlags.LOCAL_WRITE)
    except VerbsError as exc:
        raise PingpongError("Couldn't register MR") from exc
    try:
        cq = context.create_cq(cfg.rx_depth + 1, None, channel, 0)
    except VerbsError as exc:
        raise PingpongError("Couldn't create CQ") from exc
    try:
        qp = pd.create_qp(cq, cq, QueueCaps(1, cfg.rx_depth, 1, 1), QpType.RC)
    except VerbsError as exc:
        raise PingpongError("Couldn't create QP") from exc
    try:
        qp.modify(ModifyAttributes(state=QpState.INIT, pkey_index=0,
                                   port_num=cfg.ib_port,
                                   qp_access_flags=AccessFlags(0)),
                  AttrMask.STATE | AttrMask.PKEY_INDEX | AttrMask.PORT |
                  AttrMask.ACCESS_FLAGS)
    except VerbsError as exc:
        raise PingpongError("Failed to modify QP to INIT") from exc
    return PingpongContext(context=context, channel=channel, pd=pd, mr=mr,
                           cq=cq, qp=qp, buf=buf, size=cfg.size,
                           rx_depth=cfg.rx_depth)


def post_receives(ctx: PingpongContext, n: int) -> int:
    """Post up to n one-SGE receives over the shared buffer; count posted."""
    sge = ScatterGatherElement(ctx.buf.base, ctx.size, ctx.mr.lkey)
    posted = 0
    for _ in range(n):
        try:
            ctx.qp.post_recv(ReceiveWorkRequest(RECV_WRID, [sge]))
        except VerbsError:
            break
        posted += 1
    return posted


def connect_ctx(ctx: PingpongContext, my_psn: int, dest: Destination,
                cfg: PingpongConfig) -> None:
    """Walk the QP to RTR then RTS against the exchanged destination."""
    ah = AddressHandle(dlid=dest.lid, sl=cfg.sl, src_path_bits=0,
                       port_num=cfg.ib_port,
                       is_global=any(dest.gid), dgid=dest.gid)
    try:
        ctx.qp.modify(
            ModifyAttributes(state=QpState.RTR, path_mtu=cfg.mtu,
                             dest_qp_num=dest.qpn, rq_psn=dest.psn,
                             max_dest_rd_atomic=1, min_rnr_timer=12, ah=ah),
            AttrMask.STATE | AttrMask.AV | AttrMask.PATH_MTU |
            AttrMask.DEST_QPN | AttrMask.RQ_PSN |
            AttrMask.MAX_DEST_RD_ATOMIC | AttrMask.MIN_RNR_TIMER)
    except VerbsError as exc:
        raise PingpongError("Failed to modify QP to RTR") from exc
    try:
        ctx.qp.modify(
            ModifyAttributes(state=QpState.RTS, timeout=14, retry_cnt=7,
                             rnr_retry=7, sq_psn=my_psn, max_rd_atomic=1),
            AttrMask.STATE | AttrMask.TIMEOUT | AttrMask.RETRY_CNT |
            AttrMask.RNR_RETRY | AttrMask.SQ_PSN | AttrMask.MAX_QP_RD_ATOMIC)
    except VerbsError as exc:
        raise PingpongError("Failed to modify QP to RTS") from exc


def _post_send(ctx: PingpongContext) -> None:
    sge = ScatterGatherElement(ctx.buf.base, ctx.size, ctx.mr.lkey)
    ctx.qp.post_send(SendWorkRequest(SEND_WRID, [sge]))


def _validate_first_recv(ctx: PingpongContext, byte_len: int) -> None:
    if byte_len != ctx.size:
        raise PingpongError(
            f"first message was {byte_len} bytes, expected {ctx.size}")
    data = bytes(ctx.buf.data)
    # both directions carry the client's fill pattern: the server's recv
    # lands in the shared buffer before its first send is snapshotted
    if data.count(CLIENT_FILL) != len(data):
        raise PingpongError("first message payload is corrupt")


def run_loop(ctx: PingpongContext, cfg: PingpongConfig,
             abort: Optional[threading.Event] = None) -> RunStats:
    """The send/recv loop with flow-control accounting.

    Polls (or sleeps on the channel in event mode) for up to two
    completions at a time, reposts receives when the pool would drop to
    one, and posts the next send once both outstanding kinds completed.
    """
    iters = cfg.iters
    scnt = rcnt = 0
    num_cq_events = 0
    validated = False
    start = time.monotonic()
    if not cfg.is_server:
        try:
            _post_send(ctx)
        except VerbsError as exc:
            raise PingpongError("Couldn't post send") from exc
        ctx.pending = RECV_WRID | SEND_WRID
    else:
        ctx.pending = RECV_WRID
    while rcnt < iters or scnt < iters:
        if cfg.use_event:
            cq = ctx.channel.get_event(timeout=10.0)
            if cq is None:
                if abort is not None and abort.is_set():
                    raise PingpongError("aborted while waiting for CQ event")
                continue
            num_cq_events += 1
            if num_cq_events >= ctx.rx_depth:
                cq.ack_events(num_cq_events)
                num_cq_events = 0
            cq.req_notify()
        while True:
            try:
                wcs = ctx.cq.poll(2)
            except verbs.CompletionQueueError as exc:
                raise PingpongError(f"poll CQ failed: {exc}") from exc
            if wcs or cfg.use_event:
                break
            if abort is not None and abort.is_set():
                raise PingpongError("aborted while polling")
            ctx.cq.wait_for_completion(timeout=0.25)
        for wc in wcs:
            if wc.status is not WcStatus.SUCCESS:
                raise PingpongError(
                    f"Failed status {wc.status.value} for wr_id {wc.wr_id}")
            if wc.wr_id == SEND_WRID:
                scnt += 1
            elif wc.wr_id == RECV_WRID:
                if not validated:
                    _validate_first_recv(ctx, wc.byte_len)
                    validated = True
                ctx.routs -= 1
                if ctx.routs <= 1:
                    before = ctx.routs
                    ctx.routs += post_receives(ctx, ctx.rx_depth - ctx.routs)
                    ctx.reposts.append((before, ctx.routs))
                    if ctx.routs < ctx.rx_depth:
                        raise PingpongError(
                            f"Couldn't post receive ({ctx.routs})")
                rcnt += 1
            else:
                raise PingpongError(
                    f"Completion for unknown wr_id {wc.wr_id}")
            ctx.min_routs = ctx.routs if ctx.min_routs is None \
                else min(ctx.min_routs, ctx.routs)
            ctx.pending &= ~wc.wr_id
            if scnt < iters and not ctx.pending:
                try:
                    _post_send(ctx)
                except VerbsError as exc:
                    raise PingpongError("Couldn't post send") from exc
                ctx.pending = RECV_WRID | SEND_WRID
    elapsed = time.monotonic() - start
    if cfg.use_event and num_cq_events:
        ctx.cq.ack_events(num_cq_events)
    ctx.rcnt, ctx.scnt = rcnt, scnt
    return RunStats(bytes_total=2 * cfg.size * iters, elapsed=elapsed,
                    iters=iters)


def format_gid(gid: bytes) -> str:
    return ipaddress.IPv6Address(gid).compressed


def format_destination(label: str, dest: Destination) -> str:
    return (f"  {label} LID 0x{dest.lid:04x}, QPN 0x{dest.qpn:06x}, "
            f"PSN 0x{dest.psn:06x}, GID {format_gid(dest.gid)}")


def report(stats: RunStats, mine: Destination, theirs: Destination) -> str:
    """The four-line summary: both addresses, throughput, latency."""
    secs = stats.elapsed
    rate = stats.bytes_total * 8 / (secs * 1e6) if secs > 0 else float("inf")
    usec = secs * 1e6 / stats.iters
    return "\n".join((
        format_destination("local address: ", mine),
        format_destination("remote address:", theirs),
        f"{stats.bytes_total} bytes in {secs:.2f} seconds = "
        f"{rate:.2f} Mbit/sec",
        f"{stats.iters} iters in {secs:.2f} seconds = {usec:.2f} usec/iter",
    ))


@dataclass
class NodeResult:
    stats: RunStats
    my_dest: Destination
    rem_dest: Destination
    report: str
    ctx: PingpongContext


def run_node(cfg: PingpongConfig, registry: verbs.DeviceRegistry, fabric,
             rng: Optional[random.Random] = None,
             oob_ready: Optional[threading.Event] = None,
             abort: Optional[threading.Event] = None) -> NodeResult:
    """One pingpong process: init, attach, exchange, connect, loop, report."""
    rng = rng or random.Random()
    ctx = init_context(registry, cfg)
    fabric.attach(ctx.context, cfg.ib_port)
    ctx.routs = post_receives(ctx, ctx.rx_depth)
    if ctx.routs < ctx.rx_depth:
        raise PingpongError(f"Couldn't post receive ({ctx.routs})")
    if cfg.use_event:
        ctx.cq.req_notify()
    ctx.portinfo = ctx.context.query_port(cfg.ib_port)
    if ctx.portinfo.link_layer is verbs.LinkLayer.INFINIBAND and \
            not ctx.portinfo.lid:
        raise PingpongError("Couldn't get local LID")
    if cfg.gid_index is not None:
        gid = ctx.context.query_gid(cfg.ib_port, cfg.gid_index)
    else:
        gid = bytes(16)
    my_psn = rng.getrandbits(32) & 0xFFFFFF
    my_dest = Destination(lid=ctx.portinfo.lid, qpn=ctx.qp.qpn, psn=my_psn,
                          gid=gid)
    if cfg.is_server:
        rem_dest = exchange_as_server(cfg.oob_port, my_dest, ready=oob_ready)
    else:
        rem_dest = exchange_as_client(cfg.server_host, cfg.oob_port, my_dest)
    connect_ctx(ctx, my_psn, rem_dest, cfg)
    stats = run_loop(ctx, cfg, abort=abort)
    return NodeResult(stats, my_dest, rem_dest,
                      report(stats, my_dest, rem_dest), ctx)


def cleanup_node(result: NodeResult) -> None:
    """Release the resource chain bottom-up."""
    ctx = result.ctx
    ctx.qp.destroy()
    ctx.cq.destroy()
    if ctx.channel is not None:
        ctx.channel.destroy()
    ctx.mr.dereg()
    ctx.pd.dealloc()
    ctx.context.close()


def run_loopback_pair(base: PingpongConfig, faults=None, timing=None,
                      hop_latency_ms: float = 1.0, seed: Optional[int] = None,
                      join_timeout: float = 120.0):
    """Run both pingpong roles in one process over a loopback fabric.

    Returns (server NodeResult, client NodeResult, fabric). The fabric's
    pump thread drains the virtual clock while the two role threads block
    in their poll loops; the out-of-band exchange runs over localhost.
    """
    from dataclasses import replace

    from .fabric import LoopbackFabric
    from .verbs import DeviceRegistry

    registry = DeviceRegistry()
    registry.add_device("hca0")
    fabric = LoopbackFabric(faults=faults, timing=timing, registry=registry,
                            hop_latency_ms=hop_latency_ms, auto_drain=True)
    server_cfg = replace(base, server_host=None)
    client_cfg = replace(base, server_host="127.0.0.1")
    rng = random.Random(seed) if seed is not None else random.Random()
    rngs = {"server": random.Random(rng.getrandbits(64)),
            "client": random.Random(rng.getrandbits(64))}
    oob_ready = threading.Event()
    abort = threading.Event()
    results: dict[str, NodeResult] = {}
    errors: dict[str, BaseException] = {}

    def run_role(role: str, cfg: PingpongConfig):
        try:
            results[role] = run_node(
                cfg, registry, fabric, rng=rngs[role],
                oob_ready=oob_ready if role == "server" else None,
                abort=abort)
        except BaseException as exc:  # surfaced to the caller below
            errors[role] = exc
            abort.set()

    server = threading.Thread(target=run_role, args=("server", server_cfg),
                              name="pingpong-server")
    server.start()
    if not oob_ready.wait(timeout=15.0) and "server" not in errors:
        abort.set()
    client = threading.Thread(target=run_role, args=("client", client_cfg),
                              name="pingpong-client")
    client.start()
    server.join(timeout=join_timeout)
    client.join(timeout=join_timeout)
    if server.is_alive() or client.is_alive():
        abort.set()
        server.join(timeout=5)
        client.join(timeout=5)
    fabric.close()  # the world is idle; stop the pacer thread
    if errors:
        # surface the root cause, not a secondary abort on the peer side
        primary = [e for e in errors.values()
                   if "aborted while" not in str(e)]
        raise (primary or list(errors.values()))[0]
    for role in ("server", "client"):
        if role not in results:
            raise PingpongError(f"{role} never finished")
    return results["server"], results["client"], fabric
