"""
HTTP facade over the ledger so a physical cluster shares one sequencer
"""
import threading
from typing import Any, Dict, List, Optional, Tuple

import requests
from flask import Flask, jsonify, request
from flask_cors import CORS
from werkzeug.serving import make_server

from config.settings import LEDGER_PORT, REQUEST_TIMEOUT_S
from src.errors import BadSignature, LedgerDown, LedgerError, NotFound
from src.event_logger import logger
from src.ledger import (
    Block, ChainReport, Ledger, Receipt, StorageContract, Transaction, payload_from_record
)
from src.namespace import RootPointer
from src.utils import canonical_json


def create_app(ledger: Ledger) -> Flask:
    app = Flask(__name__)
    CORS(app)

    @app.route('/health', methods=['GET'])
    def health():
        """Health check endpoint"""
        return jsonify({'status': 'healthy'})

    @app.route('/api/status', methods=['GET'])
    def get_status():
        ledger.tick()
        return jsonify(ledger.status())

    @app.route('/api/transactions', methods=['POST'])
    def submit_transaction():
        try:
            tx = Transaction.from_record(request.get_json(force=True))
            receipt = ledger.submit(tx)
        except BadSignature as e:
            return jsonify({'error': 'BadSignature', 'message': str(e)}), 400
        except LedgerError as e:
            return jsonify({'error': type(e).__name__, 'message': str(e)}), 400
        return jsonify(receipt.to_record())

    @app.route('/api/transactions/<tx_id>', methods=['GET'])
    def get_transaction(tx_id: str):
        try:
            receipt, tx = ledger.find_transaction(tx_id)
        except NotFound as e:
            return jsonify({'error': 'NotFound', 'message': str(e)}), 404
        return jsonify({'receipt': receipt.to_record(), 'transaction': tx.to_record()})

    @app.route('/api/seal', methods=['POST'])
    def seal():
        data = request.get_json(silent=True) or {}
        if 'receipt' in data:
            try:
                block = ledger.wait_sealed(Receipt.from_record(data['receipt']))
            except NotFound as e:
                return jsonify({'error': 'NotFound', 'message': str(e)}), 404
        else:
            block = ledger.seal() or ledger.head()
        return jsonify({'height': block.height, 'hash': block.block_hash})

    @app.route('/api/roots/<owner>', methods=['GET'])
    def get_root(owner: str):
        ledger.tick()
        try:
            pointer = ledger.latest_root(owner)
        except NotFound as e:
            return jsonify({'error': 'NotFound', 'message': str(e)}), 404
        return jsonify({'owner': pointer.owner, 'root_ref': pointer.root_ref, 'group_id': pointer.group_id})

    @app.route('/api/shares/<receiver>', methods=['GET'])
    def get_shares(receiver: str):
        ledger.tick()
        return jsonify([tx.to_record() for tx in ledger.pending_shares(receiver)])

    @app.route('/api/contracts/<owner>', methods=['GET'])
    def get_contract(owner: str):
        ledger.tick()
        found = ledger.latest_contract(owner)
        if found is None:
            return jsonify({'error': 'NotFound', 'message': f"no contract for {owner[:12]}"}), 404
        receipt, contract = found
        return jsonify({'receipt': receipt.to_record(), 'contract': contract.to_record()})

    @app.route('/api/digest', methods=['GET'])
    def get_digest():
        return jsonify({'digest': ledger.state_digest(), 'height': ledger.height})

    @app.route('/api/blocks', methods=['GET'])
    def get_blocks():
        start = request.args.get('from', default=0, type=int)
        return jsonify([b.to_record() for b in ledger.blocks[start:]])

    @app.route('/api/verify', methods=['GET'])
    def verify():
        report = ledger.verify_chain()
        return jsonify({'valid': report.valid, 'height': report.height,
                        'failed_height': report.failed_height, 'reason': report.reason})

    return app


class LedgerServer:
    """Runs the Flask app on a background thread (werkzeug dev server)"""

    def __init__(self, ledger: Ledger, host: str = '127.0.0.1', port: int = LEDGER_PORT):
        self.ledger = ledger
        self.server = make_server(host, port, create_app(ledger), threaded=True)
        self.host = host
        self.port = self.server.server_port
        self.thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> 'LedgerServer':
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        logger.logger.info(f"Ledger service listening on {self.url}")
        return self

    def stop(self) -> None:
        self.server.shutdown()
        if self.thread is not None:
            self.thread.join(timeout=5)


class RemoteLedger:
    """Client exposing the Ledger query surface over HTTP"""

    def __init__(self, base_url: str, timeout: float = REQUEST_TIMEOUT_S):
        self.base_url = base_url.rstrip('/')
        if not self.base_url.startswith('http'):
            self.base_url = f"http://{self.base_url}"
        self.timeout = timeout
        self.session = requests.Session()

    def _call(self, method: str, path: str, **kwargs) -> Any:
        try:
            response = self.session.request(method, f"{self.base_url}{path}", timeout=self.timeout, **kwargs)
        except requests.RequestException as e:
            raise LedgerDown(f"ledger at {self.base_url} unreachable: {e}") from e
        if response.status_code == 404:
            raise NotFound(response.json().get('message', path))
        if response.status_code == 400:
            body = response.json()
            if body.get('error') == 'BadSignature':
                raise BadSignature(body.get('message', ''))
            raise LedgerError(body.get('message', ''))
        if response.status_code >= 500:
            raise LedgerDown(f"ledger returned HTTP {response.status_code}")
        return response.json()

    def health(self) -> bool:
        try:
            return self._call('GET', '/health').get('status') == 'healthy'
        except LedgerDown:
            return False

    def submit(self, tx: Transaction) -> Receipt:
        return Receipt.from_record(self._call('POST', '/api/transactions', json=tx.to_record()))

    def wait_sealed(self, receipt: Receipt) -> Dict[str, Any]:
        return self._call('POST', '/api/seal', json={'receipt': receipt.to_record()})

    def seal(self) -> Dict[str, Any]:
        return self._call('POST', '/api/seal', json={})

    def latest_root(self, owner: str) -> RootPointer:
        body = self._call('GET', f"/api/roots/{owner}")
        return RootPointer(owner=body['owner'], root_ref=body['root_ref'], group_id=body['group_id'])

    def pending_shares(self, receiver: str) -> List[Transaction]:
        return [Transaction.from_record(r) for r in self._call('GET', f"/api/shares/{receiver}")]

    def find_transaction(self, tx_id: str):
        body = self._call('GET', f"/api/transactions/{tx_id}")
        return Receipt.from_record(body['receipt']), Transaction.from_record(body['transaction'])

    def latest_contract(self, owner: str) -> Optional[Tuple[Receipt, StorageContract]]:
        try:
            body = self._call('GET', f"/api/contracts/{owner}")
        except NotFound:
            return None
        return Receipt.from_record(body['receipt']), payload_from_record(body['contract'])

    def state_digest(self) -> str:
        return self._call('GET', '/api/digest')['digest']

    def blocks(self) -> List[Block]:
        return [Block.from_bytes(canonical_json(r)) for r in self._call('GET', '/api/blocks')]

    def verify_chain(self) -> ChainReport:
        body = self._call('GET', '/api/verify')
        return ChainReport(body['valid'], body['height'], body['failed_height'], body['reason'])

    def status(self) -> Dict[str, Any]:
        return self._call('GET', '/api/status')
