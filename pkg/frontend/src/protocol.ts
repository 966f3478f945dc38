/**
 * Stream protocol client: binary frame decoding and the newest-pose-wins
 * pull loop. The socket is injected so browser WebSocket and node "ws"
 * both work (and tests can fake it).
 */

export interface FrameHeader {
  id: string;
  render_millis: number;
  width: number;
  height: number;
}

export interface DecodedFrame {
  header: FrameHeader;
  png: Uint8Array;
}

/** Split a binary /stream reply: u32 BE header length, JSON header, PNG. */
export function decodeFrame(data: ArrayBuffer | Uint8Array): DecodedFrame {
  const buf = data instanceof Uint8Array ? data : new Uint8Array(data);
  if (buf.byteLength < 4) throw new Error("frame too short");
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  const n = view.getUint32(0, false);
  if (buf.byteLength < 4 + n) throw new Error("truncated frame header");
  const header = JSON.parse(new TextDecoder().decode(buf.subarray(4, 4 + n)));
  return { header, png: buf.subarray(4 + n) };
}

export interface StreamSocket {
  send(data: string): void;
  close(): void;
}

export interface SocketHandlers {
  onOpen(): void;
  onBinary(data: Uint8Array): void;
  onText(data: string): void;
  onClose(): void;
}

export type SocketFactory = (handlers: SocketHandlers) => StreamSocket;

export interface FrameStats {
  serverMillis: number;
  roundTripMillis: number;
  framesPerSecond: number;
}

export interface FrameLoopCallbacks {
  onFrame(frame: DecodedFrame, poseJson: string): void;
  onStats?(stats: FrameStats): void;
  onStatus?(connected: boolean): void;
  onError?(message: string): void;
}

/**
 * At most one render in flight; the newest pose set while waiting is sent
 * as soon as the current frame lands. A stationary camera therefore sends
 * exactly one request per displayed frame and no pose spam.
 */
export class FrameLoop {
  private socket: StreamSocket | null = null;
  private open = false;
  private closed = false;
  private pendingPose: string | null = null;
  private inFlightId: string | null = null;
  private inFlightPose = "";
  private sentAt = 0;
  private counter = 0;
  private backoffMs = 1000;
  private lastFrameAt = 0;
  private fps = 0;

  constructor(
    private readonly connect: SocketFactory,
    private readonly callbacks: FrameLoopCallbacks,
    private readonly now: () => number = () => Date.now(),
    private readonly delay: (ms: number, fn: () => void) => void = (ms, fn) => {
      setTimeout(fn, ms);
    },
  ) {
    this.dial();
  }

  private dial() {
    if (this.closed) return;
    this.socket = this.connect({
      onOpen: () => {
        this.open = true;
        this.backoffMs = 1000;
        this.callbacks.onStatus?.(true);
        this.maybeSend();
      },
      onBinary: (data) => this.handleFrame(data),
      onText: (data) => {
        try {
          const msg = JSON.parse(data);
          if (msg.error) this.callbacks.onError?.(msg.error);
        } catch {
          this.callbacks.onError?.("unparseable server message");
        }
      },
      onClose: () => {
        this.open = false;
        this.inFlightId = null;
        this.callbacks.onStatus?.(false);
        if (!this.closed) {
          this.delay(this.backoffMs, () => this.dial());
          this.backoffMs = Math.min(this.backoffMs * 2, 10_000);
        }
      },
    });
  }

  /** Queue the newest pose (camera JSON string); stale ones are replaced. */
  setPose(poseJson: string) {
    this.pendingPose = poseJson;
    this.maybeSend();
  }

  private maybeSend() {
    if (!this.open || this.inFlightId !== null || this.pendingPose === null) return;
    const id = `f${++this.counter}`;
    const pose = this.pendingPose;
    this.pendingPose = null;
    this.inFlightId = id;
    this.inFlightPose = pose;
    this.sentAt = this.now();
    this.socket!.send(`{"id": "${id}", "camera": ${pose}}`);
  }

  private handleFrame(data: Uint8Array) {
    let frame: DecodedFrame;
    try {
      frame = decodeFrame(data);
    } catch (e) {
      this.callbacks.onError?.(`bad frame: ${e}`);
      return;
    }
    if (frame.header.id !== this.inFlightId) return; // stale or foreign
    this.inFlightId = null;
    const t = this.now();
    const rtt = t - this.sentAt;
    if (this.lastFrameAt > 0) {
      const dt = (t - this.lastFrameAt) / 1000;
      if (dt > 0) this.fps = 0.8 * this.fps + 0.2 / dt;
    }
    this.lastFrameAt = t;
    this.callbacks.onFrame(frame, this.inFlightPose);
    this.callbacks.onStats?.({
      serverMillis: frame.header.render_millis,
      roundTripMillis: rtt,
      framesPerSecond: this.fps,
    });
    this.maybeSend(); // send the newest pose that arrived while rendering
  }

  close() {
    this.closed = true;
    this.socket?.close();
  }
}
