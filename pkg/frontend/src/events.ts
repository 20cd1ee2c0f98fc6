/**
 * Resumable server-sent-events client for the session event stream.
 *
 * A single consumer owns the push stream. Resume state is the last
 * delivered seq: every (re)connect asks the service to replay from
 * there via both the `since` query parameter and the standard
 * `Last-Event-ID` header, so a forced disconnect never drops or
 * duplicates events. Reconnects back off exponentially and surface a
 * "reconnecting" status for the UI banner.
 */
import { SessionEvent, sessionEventSchema } from "./protocol.js";

export interface EventStreamOptions {
  /** fetch implementation (injectable for tests). */
  fetchImpl?: typeof fetch;
  /** Initial reconnect delay, ms. Doubles per attempt up to maxBackoffMs. */
  backoffMs?: number;
  maxBackoffMs?: number;
  onEvent: (event: SessionEvent) => void;
  onStatus?: (status: "connected" | "reconnecting" | "stopped") => void;
}

interface SseFrame {
  id?: string;
  event?: string;
  data: string;
}

/** Incremental parser for the text/event-stream framing. */
export class SseParser {
  private buffer = "";

  push(chunk: string): SseFrame[] {
    this.buffer += chunk;
    const frames: SseFrame[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n\n")) >= 0) {
      const block = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 2);
      const frame: SseFrame = { data: "" };
      const dataLines: string[] = [];
      for (const line of block.split("\n")) {
        if (line.startsWith(":")) continue; // comment / heartbeat
        const sep = line.indexOf(":");
        if (sep < 0) continue;
        const field = line.slice(0, sep);
        const value = line.slice(sep + 1).replace(/^ /, "");
        if (field === "id") frame.id = value;
        else if (field === "event") frame.event = value;
        else if (field === "data") dataLines.push(value);
      }
      frame.data = dataLines.join("\n");
      if (frame.data || frame.id || frame.event) frames.push(frame);
    }
    return frames;
  }
}

export class EventStream {
  private lastSeq: number;
  private stopped = false;
  private abort: AbortController | null = null;
  private readonly fetchImpl: typeof fetch;
  private readonly backoffMs: number;
  private readonly maxBackoffMs: number;

  constructor(
    private readonly baseUrl: string,
    private readonly sessionId: string,
    private readonly opts: EventStreamOptions,
    startSeq = 0,
  ) {
    this.lastSeq = startSeq;
    this.fetchImpl = opts.fetchImpl ?? fetch;
    this.backoffMs = opts.backoffMs ?? 500;
    this.maxBackoffMs = opts.maxBackoffMs ?? 10_000;
  }

  get resumeSeq(): number {
    return this.lastSeq;
  }

  /** Run until stop(); resolves when stopped. */
  async run(): Promise<void> {
    let backoff = this.backoffMs;
    while (!this.stopped) {
      try {
        await this.consumeOnce();
        backoff = this.backoffMs; // clean server close: reconnect promptly
      } catch {
        // fall through to backoff below
      }
      if (this.stopped) break;
      this.opts.onStatus?.("reconnecting");
      await delay(backoff);
      backoff = Math.min(backoff * 2, this.maxBackoffMs);
    }
    this.opts.onStatus?.("stopped");
  }

  stop(): void {
    this.stopped = true;
    this.abort?.abort();
  }

  private async consumeOnce(): Promise<void> {
    this.abort = new AbortController();
    const url = `${this.baseUrl}/sessions/${this.sessionId}/events?since=${this.lastSeq}`;
    const resp = await this.fetchImpl(url, {
      headers: {
        accept: "text/event-stream",
        "last-event-id": String(this.lastSeq),
      },
      signal: this.abort.signal,
    });
    if (!resp.ok || !resp.body) {
      throw new Error(`event stream HTTP ${resp.status}`);
    }
    this.opts.onStatus?.("connected");
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return;
      for (const frame of parser.push(decoder.decode(value, { stream: true }))) {
        if (!frame.data) continue;
        const seq = frame.id !== undefined ? Number(frame.id) : NaN;
        if (!Number.isFinite(seq)) continue;
        if (seq <= this.lastSeq) continue; // replayed duplicate
        const event = sessionEventSchema.parse({
          seq,
          kind: frame.event ?? "message",
          payload: JSON.parse(frame.data),
        });
        this.lastSeq = seq;
        this.opts.onEvent(event);
      }
    }
  }
}

function delay(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
