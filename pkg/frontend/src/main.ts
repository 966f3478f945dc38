import { Hud } from "./hud.js";
import { FrameLoop, decodeFrame } from "./protocol.js";
import { OrbitState, orbitUpdate, poseSerialize } from "./orbit.js";

async function boot() {
  const img = document.getElementById("view") as HTMLImageElement;
  const hudEl = document.getElementById("hud") as HTMLElement;
  const banner = document.getElementById("banner") as HTMLElement;
  const hud = new Hud(hudEl);

  const scene = await (await fetch("/scene")).json();
  let state: OrbitState = {
    target: scene.orbit.target,
    radius: scene.orbit.radius,
    azimuth: 0,
    elevation: 0.2,
    fovDeg: 40,
    width: scene.width,
    height: scene.height,
  };

  const proto = location.protocol === "https:" ? "wss" : "ws";
  const loop = new FrameLoop(
    (handlers) => {
      const ws = new WebSocket(`${proto}://${location.host}/stream`);
      ws.binaryType = "arraybuffer";
      ws.onopen = () => handlers.onOpen();
      ws.onmessage = (ev) => {
        if (typeof ev.data === "string") handlers.onText(ev.data);
        else handlers.onBinary(new Uint8Array(ev.data));
      };
      ws.onclose = () => handlers.onClose();
      return { send: (d) => ws.send(d), close: () => ws.close() };
    },
    {
      onFrame: (frame) => {
        const blob = new Blob([frame.png as BlobPart], { type: "image/png" });
        const url = URL.createObjectURL(blob);
        const old = img.src;
        img.src = url;
        if (old.startsWith("blob:")) URL.revokeObjectURL(old);
      },
      onStats: (s) => hud.setStats(s),
      onStatus: (up) => {
        hud.setConnected(up);
        banner.style.display = up ? "none" : "block";
      },
      onError: (msg) => console.warn("stream:", msg),
    },
  );

  const push = () => loop.setPose(poseSerialize(state));
  push();

  let dragging = false;
  img.addEventListener("mousedown", () => (dragging = true));
  window.addEventListener("mouseup", () => (dragging = false));
  window.addEventListener("mousemove", (ev) => {
    if (!dragging) return;
    state = orbitUpdate(state, { dragX: ev.movementX, dragY: ev.movementY });
    push();
  });
  img.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    state = orbitUpdate(state, { scroll: Math.sign(ev.deltaY) });
    push();
  });
}

boot();
