"""
Logging System Module
Run ledger: training runs, evaluation runs and errors in SQLite
"""

import os
import json
import sqlite3
import logging
from datetime import datetime
from config import Config


class RunLedger:
    def __init__(self, db_path=None):
        self.db_path = db_path or Config.DATABASE_FILE
        self._init_database()

    def _connect(self):
        return sqlite3.connect(self.db_path)

    def _init_database(self):
        """Initialize SQLite database"""
        try:
            os.makedirs(os.path.dirname(self.db_path) or '.', exist_ok=True)
            conn = self._connect()
            cursor = conn.cursor()

            cursor.execute('''
                CREATE TABLE IF NOT EXISTS train_runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    timestamp TEXT NOT NULL,
                    family TEXT,
                    n_agents INTEGER,
                    instances INTEGER,
                    adam_steps INTEGER,
                    lbfgs_steps INTEGER,
                    final_loss REAL,
                    final_residual REAL,
                    wall_clock REAL,
                    checkpoint TEXT,
                    status TEXT,
                    error_message TEXT
                )
            ''')

            cursor.execute('''
                CREATE TABLE IF NOT EXISTS eval_runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    timestamp TEXT NOT NULL,
                    checkpoint TEXT,
                    split TEXT,
                    total INTEGER,
                    passed INTEGER,
                    avg_cost REAL,
                    avg_violation REAL,
                    avg_residual REAL,
                    wall_clock REAL
                )
            ''')

            cursor.execute('''
                CREATE TABLE IF NOT EXISTS error_logs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    timestamp TEXT NOT NULL,
                    error_type TEXT,
                    error_message TEXT,
                    resolved INTEGER DEFAULT 0
                )
            ''')

            conn.commit()
            conn.close()

        except Exception as e:
            logging.error(f"Error initializing run ledger: {str(e)}")

    def log_train_start(self, family, n_agents, instances, cfg):
        """Log training start, returns the run id"""
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO train_runs
                (timestamp, family, n_agents, instances, adam_steps, lbfgs_steps, status)
                VALUES (?, ?, ?, ?, ?, ?, ?)
            ''', (
                datetime.now().isoformat(),
                family,
                n_agents,
                instances,
                cfg.adam_steps,
                cfg.lbfgs_steps,
                'started'
            ))
            run_id = cursor.lastrowid
            conn.commit()
            conn.close()
            return run_id

        except Exception as e:
            logging.error(f"Error logging train start: {str(e)}")
            return None

    def log_train_complete(self, run_id, success, report=None, checkpoint=None, error_message=None):
        """Log training completion"""
        if run_id is None:
            return
        try:
            conn = self._connect()
            cursor = conn.cursor()
            status = 'completed' if success else 'failed'
            final_loss = report.losses[-1] if report is not None and report.losses else None
            final_residual = report.residuals[-1] if report is not None and report.residuals else None
            wall_clock = report.wall_clock[-1] if report is not None and report.wall_clock else None

            cursor.execute('''
                UPDATE train_runs
                SET status = ?, final_loss = ?, final_residual = ?, wall_clock = ?,
                    checkpoint = ?, error_message = ?
                WHERE id = ?
            ''', (status, final_loss, final_residual, wall_clock,
                  str(checkpoint) if checkpoint else None, error_message, run_id))

            conn.commit()
            conn.close()

        except Exception as e:
            logging.error(f"Error logging train complete: {str(e)}")

    def log_eval(self, checkpoint, split, report):
        """Log an evaluation report"""
        try:
            agg = report.aggregates
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO eval_runs
                (timestamp, checkpoint, split, total, passed, avg_cost, avg_violation, avg_residual, wall_clock)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
            ''', (
                datetime.now().isoformat(),
                str(checkpoint),
                split,
                agg['total'],
                agg['passed'],
                agg['avg_cost'],
                agg['avg_max_violation'],
                agg['avg_residual'],
                report.wall_clock
            ))
            conn.commit()
            conn.close()

        except Exception as e:
            logging.error(f"Error logging evaluation: {str(e)}")

    def log_error(self, error_type, error_message):
        """Log system error"""
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO error_logs (timestamp, error_type, error_message)
                VALUES (?, ?, ?)
            ''', (
                datetime.now().isoformat(),
                error_type,
                error_message
            ))
            conn.commit()
            conn.close()

        except Exception as e:
            logging.error(f"Error logging error: {str(e)}")

    def _rows(self, query, params=()):
        conn = self._connect()
        cursor = conn.cursor()
        cursor.execute(query, params)
        columns = [description[0] for description in cursor.description]
        rows = [dict(zip(columns, row)) for row in cursor.fetchall()]
        conn.close()
        return rows

    def get_recent_runs(self, limit=100):
        """Get recent training and evaluation runs"""
        try:
            return {
                'train': self._rows('SELECT * FROM train_runs ORDER BY id DESC LIMIT ?', (limit,)),
                'eval': self._rows('SELECT * FROM eval_runs ORDER BY id DESC LIMIT ?', (limit,)),
            }
        except Exception as e:
            logging.error(f"Error getting recent runs: {str(e)}")
            return {'train': [], 'eval': []}

    def get_recent_errors(self, limit=50):
        """Unresolved errors, newest first"""
        try:
            return self._rows(
                'SELECT * FROM error_logs WHERE resolved = 0 ORDER BY id DESC LIMIT ?', (limit,))
        except Exception as e:
            logging.error(f"Error getting recent errors: {str(e)}")
            return []

    def get_statistics(self):
        """Get ledger statistics"""
        try:
            conn = self._connect()
            cursor = conn.cursor()

            cursor.execute("SELECT COUNT(*) FROM train_runs WHERE status = 'completed'")
            completed = cursor.fetchone()[0]

            cursor.execute("SELECT COUNT(*) FROM train_runs WHERE status = 'failed'")
            failed = cursor.fetchone()[0]

            cursor.execute('SELECT SUM(passed), SUM(total), COUNT(*) FROM eval_runs')
            passed, total, evals = cursor.fetchone()

            cursor.execute('SELECT COUNT(*) FROM error_logs WHERE resolved = 0')
            unresolved_errors = cursor.fetchone()[0]

            conn.close()

            return {
                'completed_trainings': completed,
                'failed_trainings': failed,
                'evaluations': evals,
                'pass_rate': round((passed / total * 100) if total else 0, 2),
                'unresolved_errors': unresolved_errors,
            }

        except Exception as e:
            logging.error(f"Error getting statistics: {str(e)}")
            return {}

    def export_json(self, path):
        """Dump the ledger statistics and recent runs to JSON"""
        with open(path, 'w') as f:
            json.dump({'statistics': self.get_statistics(), 'runs': self.get_recent_runs()}, f, indent=2)
