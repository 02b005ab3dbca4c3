# Generated by Django 5.1.1

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=255)),
                ('config', models.JSONField(default=dict, help_text='ModelConfig as JSON')),
                ('data_dir', models.CharField(max_length=500)),
                ('out_dir', models.CharField(blank=True, max_length=500)),
                ('max_steps', models.PositiveIntegerField(blank=True, null=True)),
                ('epochs', models.PositiveIntegerField(blank=True, null=True)),
                ('status', models.CharField(choices=[('queued', 'Queued'), ('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='queued', max_length=20)),
                ('failure_reason', models.TextField(blank=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
        ),
        migrations.CreateModel(
            name='Checkpoint',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('step', models.PositiveIntegerField()),
                ('path', models.CharField(max_length=500)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='checkpoints', to='conversion.trainingrun')),
            ],
            options={
                'unique_together': {('run', 'step')},
            },
        ),
        migrations.CreateModel(
            name='EvaluationReport',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('p_lf0', models.FloatField(blank=True, null=True)),
                ('speaker_accuracy', models.FloatField()),
                ('eer', models.FloatField()),
                ('eer_threshold', models.FloatField()),
                ('wer', models.FloatField(blank=True, null=True)),
                ('n_pairs', models.PositiveIntegerField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('checkpoint', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='reports', to='conversion.checkpoint')),
            ],
        ),
        migrations.CreateModel(
            name='StepRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('step', models.PositiveIntegerField()),
                ('epoch', models.PositiveIntegerField()),
                ('lr', models.FloatField()),
                ('total', models.FloatField()),
                ('terms', models.JSONField(default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='step_records', to='conversion.trainingrun')),
            ],
            options={
                'indexes': [models.Index(fields=['run', 'step'], name='conversion_step_run_idx')],
                'unique_together': {('run', 'step')},
            },
        ),
    ]
