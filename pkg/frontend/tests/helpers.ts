import * as net from "node:net";
import * as readline from "node:readline";

/** Pull lines off a socket one at a time; null means the peer closed. */
export class LineReader {
  private buffered: string[] = [];
  private waiters: Array<(line: string | null) => void> = [];
  private ended = false;

  constructor(socket: net.Socket) {
    const rl = readline.createInterface({ input: socket, crlfDelay: Infinity });
    rl.on("line", (line) => {
      const waiter = this.waiters.shift();
      if (waiter) {
        waiter(line);
      } else {
        this.buffered.push(line);
      }
    });
    rl.on("close", () => {
      this.ended = true;
      for (const waiter of this.waiters.splice(0)) {
        waiter(null);
      }
    });
  }

  next(): Promise<string | null> {
    const line = this.buffered.shift();
    if (line !== undefined) {
      return Promise.resolve(line);
    }
    if (this.ended) {
      return Promise.resolve(null);
    }
    return new Promise((resolve) => this.waiters.push(resolve));
  }
}
