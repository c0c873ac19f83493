"""Query a running virtual-sensor service.

    hotleg serve --checkpoint runs/demo/train/checkpoint --port 8080 &
    python3 demos/serve_client.py http://127.0.0.1:8080 0.7
"""
import json
import sys
import time
import urllib.error
import urllib.request

base = sys.argv[1] if len(sys.argv) > 1 else "http://127.0.0.1:8080"
v_in = float(sys.argv[2]) if len(sys.argv) > 2 else 0.73


def get(path):
    try:
        with urllib.request.urlopen(base + path, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


# weights load in the background; wait for the service to report ready
for _ in range(100):
    status, health = get("/health")
    if status != 503:
        break
    time.sleep(0.2)
print("health:", status, health["status"])

body = json.dumps({"v_in": v_in}).encode()
req = urllib.request.Request(base + "/predict", data=body, method="POST",
                             headers={"Content-Type": "application/json"})
with urllib.request.urlopen(req, timeout=30) as resp:
    doc = json.loads(resp.read())
print(f"v_in {doc['v_in']} -> {doc['n_points']} nodes in {doc['inference_time'] * 1e3:.2f} ms")
for name in doc["parameter_order"]:
    print(f"  {name}: max {max(doc[name]):.5g}")
