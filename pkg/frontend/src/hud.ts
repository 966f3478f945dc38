import type { FrameStats } from "./protocol.js";

/** Rolling telemetry shown over the viewport. */
export class Hud {
  private stats: FrameStats | null = null;
  private connected = false;

  constructor(private readonly el: HTMLElement | null = null) {}

  setStats(stats: FrameStats) {
    this.stats = stats;
    this.render();
  }

  setConnected(connected: boolean) {
    this.connected = connected;
    this.render();
  }

  lines(): string[] {
    if (!this.connected) return ["disconnected - retrying..."];
    if (!this.stats) return ["connected"];
    return [
      `server ${this.stats.serverMillis.toFixed(1)} ms`,
      `round-trip ${this.stats.roundTripMillis.toFixed(1)} ms`,
      `${this.stats.framesPerSecond.toFixed(1)} fps`,
    ];
  }

  private render() {
    if (this.el) this.el.innerHTML = this.lines().map((l) => `<div>${l}</div>`).join("");
  }
}
