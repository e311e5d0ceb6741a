import json
import socket
import threading

import numpy as np
import pytest

from mlo_ptrl.bridge import MAX_LINE, BridgeEnv, BridgeError, Session, encode, make_server
from mlo_ptrl.ptrl import run_training
from mlo_ptrl.vdn import TrainConfig
from mlo_ptrl.wlan import WlanEnv, desk_scenario


def req(**msg):
    return json.dumps({"v": 1, **msg})


@pytest.fixture
def server():
    srv = make_server(desk_scenario())
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield srv
    srv.shutdown()
    srv.server_close()


class TestSession:
    def test_step_before_reset(self):
        s = Session(desk_scenario())
        r = s.handle(req(cmd="step", assignment={"2.4": [1, 2], "5": [1, 2], "6": [1, 2]}))
        assert not r["ok"] and "before reset" in r["error"]

    def test_happy_path(self):
        s = Session(desk_scenario())
        r = s.handle(req(cmd="reset", seed=3))
        assert r["ok"] and r["initial_assignment"]["5"] == [1, 1] and set(r["bands"]) == {"2.4", "5", "6"}
        r = s.handle(req(cmd="step", assignment={"2.4": [1, 2], "5": [3, 1], "6": [2, 2]}))
        assert r["ok"]
        for b in ("2.4", "5", "6"):
            assert len(r["bands"][b]["ap_mcs"]) == 2 and 0 <= r["bands"][b]["team_mcs"] <= 13

    def test_matches_env(self):
        s, env = Session(desk_scenario()), WlanEnv(desk_scenario())
        s.handle(req(cmd="reset", seed=5))
        env.reset(5)
        a = {"2.4": [1, 1], "5": [2, 3], "6": [3, 3]}
        r = s.handle(req(cmd="step", assignment=a))
        direct = env.step(a)
        assert all(r["bands"][b] == direct[b].to_json() for b in a)

    @pytest.mark.parametrize("line", [
        "not json", "[1, 2]", json.dumps({"cmd": "info"}), json.dumps({"v": 2, "cmd": "info"}),
        req(cmd="launch"), req(cmd="reset", seed=-1), req(cmd="reset"),
    ])
    def test_errors_keep_session(self, line):
        s = Session(desk_scenario())
        assert s.handle(line)["ok"] is False
        assert s.handle(req(cmd="info"))["ok"]

    def test_bad_assignment(self):
        s = Session(desk_scenario())
        s.handle(req(cmd="reset", seed=0))
        for a in ({"2.4": [1, 9], "5": [1, 1], "6": [1, 1]}, {"2.4": [1]}, "x"):
            r = s.handle(req(cmd="step", assignment=a))
            assert not r["ok"]

    def test_oversize(self):
        assert not Session(desk_scenario()).handle("x" * (MAX_LINE + 1))["ok"]


class TestTcp:
    def test_client_round_trip(self, server):
        host, port = server.server_address[:2]
        with BridgeEnv(host, port) as env:
            assert env.band_ids == ["2.4", "5", "6"] and env.n_aps == 2
            with pytest.raises(BridgeError):
                env.initial_assignment()
            env.reset(1)
            res = env.step({"2.4": [1, 2], "5": [2, 3], "6": [3, 1]})
            assert res["5"].ap_mcs.shape == (2,)
            with pytest.raises(BridgeError, match="bad assignment"):
                env.step({"2.4": [7, 7], "5": [1, 1], "6": [1, 1]})
            # session survives the bad request
            env.step({"2.4": [1, 1], "5": [1, 1], "6": [1, 1]})

    def test_raw_protocol(self, server):
        with socket.create_connection(server.server_address[:2], timeout=5) as sock:
            f = sock.makefile("rb")
            sock.sendall(b"garbage\n")
            assert json.loads(f.readline())["ok"] is False
            sock.sendall(encode({"cmd": "bye"}))
            reply = json.loads(f.readline())
            assert reply["ok"] and reply["v"] == 1

    def test_loopback_equals_in_process(self, server):
        cfg = TrainConfig(hidden_dim=8, mlp_hidden_dim=8, batch_size=8, n_steps=10, ep_buffer_size=10,
                          total_steps=100)
        direct = run_training(desk_scenario(), "oVDN", cfg, seed=2)
        with BridgeEnv(*server.server_address[:2]) as env:
            bridged = run_training(desk_scenario(), "oVDN", cfg, seed=2, env=env)
        assert direct.rows_csv() == bridged.rows_csv()
        assert all(np.array_equal(direct.mcs[b], bridged.mcs[b]) for b in direct.band_ids)
