"""
Command-line interface: keys, node lifecycle, file operations, sharing,
audits and simulation runs

Every command is a thin adapter over workflows / simnet / node_service.
"""
import argparse
import asyncio
import json
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from config.settings import (
    CONFIG_FILE_NAME, DATA_DIR, DEFAULT_HOST, DEFAULT_PORT, ENV_DATA_DIR, ENV_ENTRY, ENV_IDENTITY,
    ENV_LEDGER, IDENTITY_FILE, LEDGER_FILE_NAME, LEDGER_PORT, LOG_LEVEL, REPLICATION_FACTOR,
    SIM_DEFAULT_LATENCY_MS, SIM_DEFAULT_SEED
)
from src import workflows
from src.crypto_pre import KeyPair, PrivateKey, PublicKey, keygen
from src.errors import InvalidKey, MtfsError, WorkflowError
from src.event_logger import logger
from src.ledger import Ledger
from src.ledger_service import LedgerServer, RemoteLedger
from src.merkle_store import ObjectStore
from src.node_service import NodeService, TcpNetwork, probe
from src.replication import ReplicationPolicy, audit_round
from src.simnet import LatencyModel, SimConfig, export_traces_csv, run as run_simulation
from src.storage_node import StorageClient, StorageNode
from src.tree_overlay import NodeInfo, RedundancyConfig, RedundancyMode
from src.utils import ensure_dir_exists


# ========== CONFIGURATION ==========

@dataclass(frozen=True)
class CliConfig:
    data_dir: Path = DATA_DIR
    identity: Path = IDENTITY_FILE
    entry: str = f"{DEFAULT_HOST}:{DEFAULT_PORT}"
    ledger: Optional[str] = None  # http address; None uses the chain file in data_dir
    redundancy: str = RedundancyMode.NONE.value
    r: int = REPLICATION_FACTOR
    json_output: bool = False

    @property
    def entry_address(self) -> Tuple[str, int]:
        return parse_address(self.entry)


_FILE_KEYS = {'data_dir', 'identity', 'entry', 'ledger', 'redundancy', 'r'}
_ENV_KEYS = {ENV_DATA_DIR: 'data_dir', ENV_IDENTITY: 'identity', ENV_ENTRY: 'entry', ENV_LEDGER: 'ledger'}


def parse_address(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(':')
    if not sep or not port.isdigit():
        raise WorkflowError(f"address must be host:port, got {text!r}")
    return host or DEFAULT_HOST, int(port)


def _coerce(values: Mapping[str, Any]) -> Dict[str, Any]:
    result = {}
    for key, value in values.items():
        if value is None:
            continue
        if key in ('data_dir', 'identity'):
            value = Path(value).expanduser()
        elif key == 'r':
            value = int(value)
        elif key == 'redundancy':
            value = RedundancyMode(value).value
        result[key] = value
    return result


def load_config(args: argparse.Namespace, env: Optional[Mapping[str, str]] = None,
                config_file: Optional[Path] = None) -> CliConfig:
    """Defaults < mtfs.toml < environment < flags"""
    env = os.environ if env is None else env
    config = CliConfig()

    path = config_file or getattr(args, 'config', None) or Path.cwd() / CONFIG_FILE_NAME
    path = Path(path)
    if path.is_file():
        with open(path, 'rb') as f:
            try:
                loaded = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise WorkflowError(f"{path}: {e}") from e
        unknown = set(loaded) - _FILE_KEYS
        if unknown:
            logger.logger.warning(f"Ignoring unknown keys in {path}: {sorted(unknown)}")
        config = replace(config, **_coerce({k: v for k, v in loaded.items() if k in _FILE_KEYS}))

    from_env = {field: env[name] for name, field in _ENV_KEYS.items() if env.get(name)}
    if 'data_dir' in from_env and 'identity' not in from_env:
        from_env['identity'] = Path(from_env['data_dir']) / IDENTITY_FILE.name
    config = replace(config, **_coerce(from_env))

    flags = {key: getattr(args, key, None) for key in ('data_dir', 'identity', 'entry', 'ledger', 'redundancy', 'r')}
    config = replace(config, **_coerce(flags))
    return replace(config, json_output=bool(getattr(args, 'json', False)))


# ========== IDENTITY ==========

def save_identity(keys: KeyPair, path: Path) -> Path:
    ensure_dir_exists(path.parent)
    record = {'version': 1, 'public': keys.public.hex(), 'private': keys.private.to_bytes().hex()}
    path.write_text(json.dumps(record, indent=2))
    os.chmod(path, 0o600)
    return path


def load_identity(path: Path) -> KeyPair:
    if not path.is_file():
        raise InvalidKey(f"no identity at {path}; run 'keygen' first")
    try:
        record = json.loads(path.read_text())
        private = PrivateKey.from_bytes(bytes.fromhex(record['private']))
    except (ValueError, KeyError, TypeError) as e:
        raise InvalidKey(f"identity file {path} is unreadable: {e}") from e
    public = private.public_key()
    if record.get('public') and PublicKey.from_hex(record['public']) != public:
        raise InvalidKey(f"identity file {path} has mismatched keys")
    return KeyPair(private=private, public=public)


# ========== OUTPUT ==========

def emit(config: CliConfig, record: Any, human: Optional[Callable[[Any], str]] = None) -> None:
    if config.json_output or human is None:
        print(json.dumps(record, sort_keys=True, separators=(',', ':')))
    else:
        print(human(record))


def _entry_row(entry) -> Dict[str, Any]:
    return {'name': entry.name, **entry.to_record()}


def _listing(rows: List[Dict[str, Any]]) -> str:
    if not rows:
        return "(empty)"
    width = max(len(r['name']) for r in rows)
    return "\n".join(f"{r['name']:<{width}}  {r['kind']:<6}  {r['size']:>12}  {r['object_ref']}" for r in rows)


# ========== USER SESSIONS ==========

def _ledger(config: CliConfig):
    if config.ledger:
        return RemoteLedger(config.ledger)
    return Ledger(path=config.data_dir / LEDGER_FILE_NAME)


def _session(config: CliConfig) -> Tuple[workflows.UserSession, TcpNetwork]:
    keys = load_identity(config.identity)
    host, port = config.entry_address
    network = TcpNetwork(host, port)
    session = workflows.UserSession(keys, _ledger(config), network,
                                    policy=ReplicationPolicy(r=config.r))
    return session, network


def _with_session(config: CliConfig, action: Callable[[workflows.UserSession], Any]) -> Any:
    session, network = _session(config)
    try:
        return action(session)
    finally:
        network.close()


# ========== COMMANDS ==========

def cmd_keygen(args: argparse.Namespace, config: CliConfig) -> int:
    if config.identity.exists() and not args.force:
        raise WorkflowError(f"{config.identity} exists; pass --force to replace it")
    keys = keygen()
    save_identity(keys, config.identity)
    logger.log_event('identity_created', {'path': str(config.identity), 'owner': keys.public.digest()})
    emit(config, {'public_key': keys.public.hex(), 'owner': keys.public.digest(),
                  'identity': str(config.identity)},
         lambda r: r['public_key'])
    return 0


def cmd_node_start(args: argparse.Namespace, config: CliConfig) -> int:
    node_keys_path = config.data_dir / 'node_identity.json'
    if node_keys_path.exists():
        keys = load_identity(node_keys_path)
    else:
        keys = keygen()
        save_identity(keys, node_keys_path)

    ledger_server = None
    if args.with_ledger:
        ledger = Ledger(path=config.data_dir / LEDGER_FILE_NAME)
        ledger_server = LedgerServer(ledger, args.host, args.ledger_port).start()
    elif config.ledger:
        ledger = RemoteLedger(config.ledger)
    else:
        ledger = None

    def contract_known(receipt: Dict[str, Any]) -> bool:
        if ledger is None:
            return True
        try:
            ledger.find_transaction(receipt['tx_id'])
            return True
        except (MtfsError, KeyError, TypeError):
            return False

    redundancy = RedundancyConfig(mode=RedundancyMode(config.redundancy))
    node = StorageNode(NodeInfo(keys.public.digest(), args.host, args.port),
                       store=ObjectStore(config.data_dir / 'node', capacity_bytes=args.capacity),
                       redundancy=redundancy, contract_check=contract_known)
    service = NodeService(node, args.host, args.port)

    async def _main() -> None:
        entry = None
        if args.join:
            entry = await probe(*parse_address(args.join))
        cluster_with = await probe(*parse_address(args.cluster_with)) if args.cluster_with else None
        await service.run(entry, cluster_with, duration=args.duration)

    try:
        asyncio.run(_main())
    except KeyboardInterrupt:
        logger.logger.info("Node stopped by user")
    finally:
        if ledger_server is not None:
            ledger_server.stop()
    emit(config, service.get_metrics(),
         lambda m: f"node {m['node'][:12]} stopped (group {m['group_id']}, {m['objects']} objects)")
    return 0


def cmd_put(args: argparse.Namespace, config: CliConfig) -> int:
    content = Path(args.local).read_bytes()
    receipt = _with_session(config, lambda s: workflows.put_file(s, args.remote, content))
    emit(config, {'path': args.remote, 'size': len(content), **receipt.to_record()},
         lambda r: f"stored {r['path']} ({r['size']} bytes) in block {r['height']}")
    return 0


def cmd_get(args: argparse.Namespace, config: CliConfig) -> int:
    owner = PublicKey.from_hex(args.owner).digest() if args.owner else None
    content = _with_session(config, lambda s: workflows.get_file(s, args.remote, owner=owner))
    Path(args.local).write_bytes(content)
    emit(config, {'path': args.remote, 'local': args.local, 'size': len(content)},
         lambda r: f"wrote {r['size']} bytes to {r['local']}")
    return 0


def cmd_ls(args: argparse.Namespace, config: CliConfig) -> int:
    entries = _with_session(config, lambda s: workflows.list_folder(s, args.remote))
    emit(config, [_entry_row(e) for e in entries], _listing)
    return 0


def cmd_mkdir(args: argparse.Namespace, config: CliConfig) -> int:
    receipt = _with_session(config, lambda s: workflows.make_folder(s, args.remote))
    emit(config, {'path': args.remote, **receipt.to_record()}, lambda r: f"created {r['path']}")
    return 0


def cmd_du(args: argparse.Namespace, config: CliConfig) -> int:
    total = _with_session(config, lambda s: workflows.storage_usage(s, args.remote))
    emit(config, {'path': args.remote, 'bytes': total}, lambda r: f"{r['bytes']}\t{r['path']}")
    return 0


def cmd_share(args: argparse.Namespace, config: CliConfig) -> int:
    receivers = [PublicKey.from_hex(pk) for pk in args.receivers]
    receipts = _with_session(config, lambda s: workflows.share_with_many(s, receivers, args.remote))
    emit(config, [r.to_record() for r in receipts],
         lambda rs: "\n".join(f"shared as {r['tx_id']}" for r in rs))
    return 0


def cmd_accept(args: argparse.Namespace, config: CliConfig) -> int:
    def _accept(session: workflows.UserSession):
        pending = workflows.pending_shares(session)
        if args.tx_id is None:
            return [{'tx_id': g.tx_id, 'name': g.payload.name, 'size': g.payload.size,
                     'sender': g.payload.sender} for g in pending]
        matches = [g for g in pending if g.tx_id.startswith(args.tx_id)]
        if len(matches) != 1:
            raise WorkflowError(f"{args.tx_id!r} matches {len(matches)} pending shares")
        return workflows.accept_share(session, matches[0], args.folder, args.name).to_record()

    result = _with_session(config, _accept)
    if args.tx_id is None:
        emit(config, result, lambda rows: "\n".join(
            f"{r['tx_id']}  {r['name']}  {r['size']}  from {r['sender'][:12]}" for r in rows) or "(none)")
    else:
        emit(config, result, lambda r: f"accepted into block {r['height']}")
    return 0


def cmd_cancel(args: argparse.Namespace, config: CliConfig) -> int:
    receipt = _with_session(config, workflows.cancel_subscription)
    emit(config, receipt.to_record(), lambda r: f"subscription cancelled in block {r['height']}")
    return 0


def cmd_audit(args: argparse.Namespace, config: CliConfig) -> int:
    host, port = config.entry_address
    network = TcpNetwork(host, port)
    try:
        report = audit_round(StorageClient(network), ReplicationPolicy(r=config.r))
    finally:
        network.close()
    record = {**report.summary(),
              'failures': [{'object': e.object_ref, 'holder': e.holder, 'reason': e.reason}
                           for e in report.failures]}
    emit(config, record, lambda r: (f"checked {r['checked']} replicas: {len(r['failures'])} failed, "
                                    f"{r['repairs']} repaired, {r['lost']} lost, {r['dead']} nodes down"))
    return 0


def net_stats(client: StorageClient) -> Dict[str, Any]:
    members = client.members()
    stats = client.stats_many(members)
    depths: Dict[int, int] = {}
    for node in members:
        body = stats.get(node.node_id)
        if body is None or node.group_id is None:
            continue
        depths[node.group_id.depth] = depths.get(node.group_id.depth, 0) + len(body.get('inventory', []))
    entry_stats = stats.get(client.entry().node_id) or {}
    return {
        'nodes': len(members),
        'reachable': sum(1 for body in stats.values() if body is not None),
        'height': max((n.group_id.depth for n in members if n.group_id is not None), default=0),
        'open_branches': entry_stats.get('open', 0),
        'objects_per_depth': {str(d): depths[d] for d in sorted(depths)},
    }


def cmd_net_stats(args: argparse.Namespace, config: CliConfig) -> int:
    host, port = config.entry_address
    network = TcpNetwork(host, port)
    try:
        record = net_stats(StorageClient(network))
    finally:
        network.close()
    emit(config, record, lambda r: "\n".join(
        [f"nodes: {r['nodes']} ({r['reachable']} reachable)", f"height: {r['height']}",
         f"open branches: {r['open_branches']}"]
        + [f"depth {d}: {n} objects" for d, n in r['objects_per_depth'].items()]))
    return 0


def sim_config_from_args(args: argparse.Namespace, config: CliConfig) -> SimConfig:
    redundancy = RedundancyConfig(mode=RedundancyMode(args.sim_redundancy or config.redundancy),
                                  cluster_size=args.cluster_size, link_radius=args.link_radius)
    return SimConfig(seed=args.seed, latency=LatencyModel.parse(args.latency), nodes=args.nodes,
                     redundancy=redundancy, cheaters=tuple(args.cheater or ()),
                     policy=ReplicationPolicy(r=config.r))


def cmd_sim_run(args: argparse.Namespace, config: CliConfig) -> int:
    script_path = Path(args.script)
    logger.clear()
    result = run_simulation(sim_config_from_args(args, config), script_path.read_text(),
                            base_dir=script_path.parent)
    if args.trace_csv:
        export_traces_csv(result.traces, Path(args.trace_csv))
    if args.events:
        logger.export_events(Path(args.events))
    logger.logger.info(f"Scenario events: {logger.get_event_summary()}")
    emit(config, result.outputs, lambda rows: "\n".join(
        " ".join(f"{k}={v}" for k, v in sorted(r.items())) for r in rows))
    return 0


# ========== PARSER ==========

def create_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--json', action='store_true', help='Canonical JSON output')
    common.add_argument('--data-dir', type=Path, default=None, help=f'Data directory (env {ENV_DATA_DIR})')
    common.add_argument('--identity', type=Path, default=None, help=f'Identity file (env {ENV_IDENTITY})')
    common.add_argument('--entry', default=None, help=f'Entry node host:port (env {ENV_ENTRY})')
    common.add_argument('--ledger', default=None, help=f'Ledger service address (env {ENV_LEDGER})')
    common.add_argument('--redundancy', choices=[m.value for m in RedundancyMode], default=None)
    common.add_argument('--r', type=int, default=None, help='Replication factor')
    common.add_argument('--config', type=Path, default=None, help=f'Config file (default ./{CONFIG_FILE_NAME})')
    common.add_argument('--log-level', default=LOG_LEVEL, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])

    parser = argparse.ArgumentParser(
        prog='mtfs',
        description='Private encrypted file storage over a binary-tree overlay',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog='''
Examples:
  python run.py keygen
  python run.py node start --port 7717 --with-ledger
  python run.py node start --port 7719 --join 127.0.0.1:7717 --ledger 127.0.0.1:7718
  python run.py put report.pdf /docs/report.pdf --ledger 127.0.0.1:7718
  python run.py ls /docs --json
  python run.py sim run scenario.txt --seed 7 --trace-csv traces.csv
        ''',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('keygen', parents=[common], help='Create an identity key pair')
    p.add_argument('--force', action='store_true')
    p.set_defaults(handler=cmd_keygen)

    node = sub.add_parser('node', help='Storage node lifecycle')
    node_sub = node.add_subparsers(dest='node_command', required=True)
    p = node_sub.add_parser('start', parents=[common], help='Run a storage node')
    p.add_argument('--host', default=DEFAULT_HOST)
    p.add_argument('--port', type=int, default=DEFAULT_PORT)
    p.add_argument('--join', default=None, help='host:port of a member (omit to start a new tree)')
    p.add_argument('--cluster-with', default=None, help='host:port of the cluster primary')
    p.add_argument('--capacity', type=int, default=None, help='Store capacity in bytes')
    p.add_argument('--with-ledger', action='store_true', help='Also serve the ledger')
    p.add_argument('--ledger-port', type=int, default=LEDGER_PORT)
    p.add_argument('--duration', type=float, default=None, help='Seconds to run')
    p.set_defaults(handler=cmd_node_start)

    p = sub.add_parser('put', parents=[common], help='Upload a local file')
    p.add_argument('local')
    p.add_argument('remote')
    p.set_defaults(handler=cmd_put)

    p = sub.add_parser('get', parents=[common], help='Download a file')
    p.add_argument('remote')
    p.add_argument('local')
    p.add_argument('--from', dest='owner', default=None, help="Owner's public key (hex)")
    p.set_defaults(handler=cmd_get)

    p = sub.add_parser('ls', parents=[common], help='List a folder')
    p.add_argument('remote', nargs='?', default='/')
    p.set_defaults(handler=cmd_ls)

    p = sub.add_parser('mkdir', parents=[common], help='Create a folder')
    p.add_argument('remote')
    p.set_defaults(handler=cmd_mkdir)

    p = sub.add_parser('du', parents=[common], help='Bytes stored under a folder')
    p.add_argument('remote', nargs='?', default='/')
    p.set_defaults(handler=cmd_du)

    p = sub.add_parser('share', parents=[common], help='Share a file with one or more receivers')
    p.add_argument('remote')
    p.add_argument('receivers', nargs='+', metavar='receiver_pk')
    p.set_defaults(handler=cmd_share)

    p = sub.add_parser('accept', parents=[common], help='Accept a share (no tx id lists pending shares)')
    p.add_argument('tx_id', nargs='?', default=None)
    p.add_argument('--folder', default='/')
    p.add_argument('--name', default=None)
    p.set_defaults(handler=cmd_accept)

    p = sub.add_parser('cancel', parents=[common], help='Cancel the storage subscription')
    p.set_defaults(handler=cmd_cancel)

    p = sub.add_parser('audit', parents=[common], help='Run one audit round')
    p.set_defaults(handler=cmd_audit)

    sim = sub.add_parser('sim', help='Network simulator')
    sim_sub = sim.add_subparsers(dest='sim_command', required=True)
    p = sim_sub.add_parser('run', parents=[common], help='Run a scenario script')
    p.add_argument('script')
    p.add_argument('--seed', type=int, default=SIM_DEFAULT_SEED)
    p.add_argument('--latency', default=f"fixed:{SIM_DEFAULT_LATENCY_MS:g}",
                   help="'fixed:MS' or 'uniform:LOW:HIGH'")
    p.add_argument('--nodes', type=int, default=0, help='Nodes joined before the script runs')
    p.add_argument('--sim-redundancy', choices=[m.value for m in RedundancyMode], default=None)
    p.add_argument('--cluster-size', type=int, default=3)
    p.add_argument('--link-radius', type=int, default=2)
    p.add_argument('--cheater', type=int, action='append', help='Join index of a cheating node')
    p.add_argument('--trace-csv', default=None, help='Write delivery traces as CSV')
    p.add_argument('--events', default=None, help='Write protocol events of the run as JSON')
    p.set_defaults(handler=cmd_sim_run)

    net = sub.add_parser('net', help='Network inspection')
    net_sub = net.add_subparsers(dest='net_command', required=True)
    p = net_sub.add_parser('stats', parents=[common], help='Node count, height and object spread')
    p.set_defaults(handler=cmd_net_stats)

    return parser


def main(argv: Optional[Sequence[str]] = None, env: Optional[Mapping[str, str]] = None) -> int:
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logger.set_level(args.log_level)
    try:
        config = load_config(args, env)
        return args.handler(args, config)
    except MtfsError as e:
        print(json.dumps({'error': type(e).__name__, 'message': str(e)}, sort_keys=True), file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(json.dumps({'error': type(e).__name__, 'message': str(e)}, sort_keys=True), file=sys.stderr)
        return 1
