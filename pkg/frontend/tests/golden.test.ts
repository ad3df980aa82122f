/**
 * Replays the recorded manager transcript against a real adapter.
 *
 * A fake manager walks the transcript: "send" entries go out on the wire,
 * "recv" entries must match what the adapter sends back (heartbeats are
 * skipped and counted, result wall_seconds is masked to 0 on both sides).
 * A negative control proves the harness actually fails on a wrong result.
 */
import { once } from "node:events";
import * as fs from "node:fs/promises";
import * as net from "node:net";
import * as os from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";

import { afterEach, expect, it } from "vitest";

import { runAdapter } from "../src/adapter.js";
import { Message, canonicalJson, encodeLine, parseLine } from "../src/protocol.js";
import { LineReader } from "./helpers.js";

const HERE = path.dirname(fileURLToPath(import.meta.url));
const TRANSCRIPT = path.resolve(HERE, "../../tests/golden/session3_external.jsonl");
const STUB = path.resolve(HERE, "../fixtures/stub.cjs");

interface TranscriptEntry {
  dir: "send" | "recv";
  msg: Message;
}

async function loadTranscript(): Promise<TranscriptEntry[]> {
  const text = await fs.readFile(TRANSCRIPT, "utf8");
  return text
    .split("\n")
    .filter((line) => line.trim())
    .map((line) => JSON.parse(line) as TranscriptEntry);
}

function maskWall(msg: Message): Message {
  return msg.type === "result" ? { ...msg, wall_seconds: 0 } : msg;
}

class FakeManager {
  heartbeatsSkipped = 0;
  readonly done: Promise<void>;
  private server: net.Server;
  private resolveDone!: () => void;
  private rejectDone!: (error: Error) => void;

  constructor(private entries: TranscriptEntry[]) {
    this.done = new Promise((resolve, reject) => {
      this.resolveDone = resolve;
      this.rejectDone = reject;
    });
    // a rejection may land before the test gets to await done
    this.done.catch(() => {});
    this.server = net.createServer((socket) => {
      socket.setNoDelay(true);
      socket.on("error", () => {});
      this.replay(socket).then(this.resolveDone, this.rejectDone);
    });
  }

  async listen(): Promise<{ host: string; port: number }> {
    this.server.listen(0, "127.0.0.1");
    await once(this.server, "listening");
    const address = this.server.address() as net.AddressInfo;
    return { host: address.address, port: address.port };
  }

  async close(): Promise<void> {
    await new Promise<void>((resolve) => this.server.close(() => resolve()));
  }

  private async replay(socket: net.Socket): Promise<void> {
    const reader = new LineReader(socket);
    try {
      for (const entry of this.entries) {
        if (entry.dir === "send") {
          socket.write(encodeLine(entry.msg));
          continue;
        }
        let msg: Message;
        for (;;) {
          const line = await reader.next();
          if (line === null) {
            throw new Error(
              `adapter closed before expected ${String(entry.msg.type)} message`,
            );
          }
          msg = parseLine(line);
          if (msg.type === "heartbeat") {
            this.heartbeatsSkipped += 1;
            continue;
          }
          break;
        }
        const got = canonicalJson(maskWall(msg));
        const want = canonicalJson(maskWall(entry.msg));
        if (got !== want) {
          throw new Error(`transcript mismatch:\n  got:  ${got}\n  want: ${want}`);
        }
      }
      const extra = await reader.next();
      if (extra !== null) {
        throw new Error(`unexpected message after drain: ${extra}`);
      }
    } finally {
      socket.destroy();
    }
  }
}

const cleanups: Array<() => Promise<void>> = [];

afterEach(async () => {
  for (const cleanup of cleanups.splice(0)) {
    await cleanup();
  }
});

async function replayWith(cmdTemplate: string, heartbeatSeconds = 5) {
  const manager = new FakeManager(await loadTranscript());
  const address = await manager.listen();
  cleanups.push(() => manager.close());
  const workdir = await fs.mkdtemp(path.join(os.tmpdir(), "golden-"));
  cleanups.push(() => fs.rm(workdir, { recursive: true, force: true }));
  const exitCode = await runAdapter({
    manager: address,
    workerId: "golden-worker",
    cmdTemplate,
    workdir,
    heartbeatSeconds,
  });
  return { manager, workdir, exitCode };
}

it("replays the recorded session byte for byte", async () => {
  const { manager, workdir, exitCode } = await replayWith(
    `node ${STUB} {assignment} {result}`,
  );
  await manager.done;
  expect(exitCode).toBe(0);
  const files = await fs.readdir(workdir);
  expect(files.filter((f) => f.endsWith("_assignment.json")).length).toBe(3);
});

it("keeps heartbeats flowing while the command runs", async () => {
  const { manager, exitCode } = await replayWith(
    `STUB_SLEEP_MS=350 node ${STUB} {assignment} {result}`,
    0.1,
  );
  await manager.done;
  expect(exitCode).toBe(0);
  expect(manager.heartbeatsSkipped).toBeGreaterThanOrEqual(1);
});

it("negative control: a wrong result fails the replay", async () => {
  const { manager } = await replayWith(
    `STUB_MSE_OVERRIDE=0.5 node ${STUB} {assignment} {result}`,
  );
  await expect(manager.done).rejects.toThrow(/transcript mismatch/);
});
