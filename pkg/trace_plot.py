"""Plots of a run directory: gate similarity history and the outline tree."""

import os
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import networkx as nx  # type: ignore  # noqa: E402

import config
from outline_engine import OutlineNode, parse_outline
from run_trace import load_events


def outline_graph(root: OutlineNode) -> nx.DiGraph:
    G = nx.DiGraph()
    for node, depth in root.walk():
        G.add_node(node.node_id, label=node.title, depth=depth)
        for child in node.children:
            G.add_edge(node.node_id, child.node_id)
    return G


def latest_outline(run_dir: str, topic: str) -> Optional[OutlineNode]:
    folder = os.path.join(run_dir, config.OUTLINE_DIR)
    if not os.path.isdir(folder):
        return None
    names = sorted(n for n in os.listdir(folder) if n.endswith(".md"))
    if not names:
        return None
    with open(os.path.join(folder, names[-1]), "r", encoding="utf-8") as f:
        return parse_outline(f.read(), topic)


def plot_similarity_history(run_dir: str, output: str) -> bool:
    events = [
        e for e in load_events(os.path.join(run_dir, config.TRACE_LOG))
        if e.get("kind") in ("update_accepted", "update_rejected")
    ]
    if not events:
        print("No gate decisions found")
        return False
    sims = [e["sim"] for e in events]
    colors = ["tab:green" if e["kind"] == "update_accepted" else "tab:red" for e in events]
    fig = plt.figure(figsize=(6, 4))
    plt.plot(range(len(sims)), sims, color="gray", linewidth=1)
    plt.scatter(range(len(sims)), sims, c=colors, zorder=3)
    plt.axhline(events[-1]["tau"], linestyle="--", color="black", linewidth=1)
    plt.title("Outline update similarity")
    plt.xlabel("update")
    plt.ylabel("similarity")
    plt.tight_layout()
    plt.savefig(output)
    plt.close(fig)
    print(f"History saved to {output}")
    return True


def plot_outline(root: OutlineNode, output: str) -> None:
    G = outline_graph(root)
    labels = {n: d["label"][:24] for n, d in G.nodes(data=True)}
    fig = plt.figure(figsize=(10, 7))
    pos = nx.bfs_layout(G, root.node_id) if hasattr(nx, "bfs_layout") else nx.spring_layout(G, seed=0)
    nx.draw_networkx(G, pos, labels=labels, node_color="lightblue", edge_color="gray", font_size=7)
    plt.axis("off")
    plt.tight_layout()
    plt.savefig(output)
    plt.close(fig)
    print(f"Graph saved to {output}")
