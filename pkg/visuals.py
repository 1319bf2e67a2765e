import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "fas-vit"
import matplotlib.pyplot as plt
import numpy as np


def plot_far_frr(curve, threshold=None, title="FAR / FRR"):
    """Step plot of FAR and FRR against the threshold, with the operating point marked."""
    thetas = np.array([p[0] for p in curve])
    far = np.array([p[1] for p in curve])
    frr = np.array([p[2] for p in curve])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step(thetas, far * 100, where="post", color="red", label="FAR (spoof accepted)")
    ax.step(thetas, frr * 100, where="post", color="blue", label="FRR (live rejected)")
    if threshold is not None:
        ax.axvline(threshold, color="gray", linestyle="--", label=f"threshold {threshold:.4f}")
    ax.set_title(title)
    ax.set_xlabel("Score threshold (max cosine similarity)")
    ax.set_ylabel("Rate (%)")
    ax.set_ylim(-2, 102)
    ax.legend(loc="center right")
    ax.grid(True)
    return fig


def plot_loss_history(history):
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, color in (("l_class", "tab:blue"), ("l_tap", "tab:orange"),
                       ("l_apl", "tab:green"), ("l_overall", "black")):
        values = [row[key] for row in history]
        if any(v > 0 for v in values):
            ax.plot(epochs, values, color=color, label=key)
    off = [row["epoch"] for row in history if not row["aug_enabled"]]
    if off:
        ax.axvline(off[0], color="gray", linestyle=":", label="augmentation off")
    ax.set_yscale("log")
    ax.set_title("Training loss (epoch mean)")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss")
    ax.legend()
    ax.grid(True)
    return fig


def save_svg(fig, path):
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
